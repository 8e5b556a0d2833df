//! Desk-scale reproduction of the two-type synthetic experiment: simulate,
//! fit the exponential Hawkes baseline, train the attention model, and write
//! the NLL comparison and intensity QQ data.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classic_hp::{hp_fit, hp_window_loglik, FitOptions, HawkesParams};
use crate::data::{save_dataset, split_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{attention_map, evaluate, write_attention_csv, EvalConfig, EvalReport, QqSeries};
use crate::model::{save_checkpoint, SahpConfig, SahpModel};
use crate::rng;
use crate::simulator::{simulate_dataset, HawkesSpec, TrueModel};
use crate::training::{nll_per_event, train_with_progress, write_history_csv, HistoryRow, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub seed: u64,
    /// Multiplies the sequence count; 1.0 gives 500 sequences.
    pub scale: f64,
    pub horizon: f64,
    pub base_sequences: usize,
    pub split: (f64, f64, f64),
    pub model: SahpConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub hp: FitOptions,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        let mut model = SahpConfig::new(2, 16, 2, 2);
        model.dropout = 0.1;
        model.intensity_scale = 0.05;
        Self {
            seed: 1,
            scale: 1.0,
            horizon: 100.0,
            base_sequences: 500,
            split: (0.8, 0.1, 0.1),
            model,
            train: TrainConfig {
                learning_rate: 3e-3,
                warmup_steps: 50,
                batch_size: 16,
                max_epochs: 60,
                patience: 8,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            hp: FitOptions::default(),
        }
    }
}

impl ReproduceConfig {
    pub fn num_sequences(&self) -> Result<usize> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale factor must be positive, got {}", self.scale)));
        }
        let n = (self.base_sequences as f64 * self.scale).round() as usize;
        if n < 10 {
            return Err(Error::invalid(format!(
                "scale {} leaves only {n} sequences; need at least 10",
                self.scale
            )));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub model: String,
    pub nll_per_event: f64,
}

/// Everything the run reports; written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub num_sequences: usize,
    pub split_sizes: (usize, usize, usize),
    pub mean_length: f64,
    /// Test-split NLL per event for the generating process, the fitted
    /// Hawkes baseline and the attention model.
    pub nll_table: Vec<NllRow>,
    /// Exact test NLL per event of the Hawkes baseline (closed-form compensator).
    pub hp_exact_nll_per_event: f64,
    pub hp_params: HawkesParams,
    pub sahp: EvalReport,
    pub hp: EvalReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// In-memory results of [`run_synthetic`].
pub struct ReproduceOutcome {
    pub dataset: Dataset,
    pub hp_params: HawkesParams,
    pub model: SahpModel,
    pub history: Vec<HistoryRow>,
    pub report: ReproduceReport,
}

/// Runs the experiment without touching the filesystem.
pub fn run_synthetic(config: &ReproduceConfig, mut progress: impl FnMut(&str)) -> Result<ReproduceOutcome> {
    let n = config.num_sequences()?;
    let spec = HawkesSpec::synthetic_two_type();
    let stage = |s: &'static str| move |e: Error| e.in_stage(s);

    progress(&format!("simulating {n} sequences on [0, {}]", config.horizon));
    let raw = simulate_dataset(&spec, config.horizon, n, rng::derive_seed(config.seed, rng::STREAM_SIMULATION))
        .map_err(stage("simulate"))?;
    let dataset = split_dataset(&raw, config.split, rng::derive_seed(config.seed, rng::STREAM_SPLIT))
        .map_err(stage("split"))?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let test = dataset.split(Split::Test);

    progress("fitting the Hawkes baseline");
    let init = HawkesParams::initial_guess(&train, dataset.num_types);
    let (hp_params, _) = hp_fit(&dataset, &init, &config.hp).map_err(stage("fit-hp"))?;

    progress("training the attention model");
    let model = SahpModel::init(config.model.clone(), rng::derive_seed(config.seed, rng::STREAM_INIT))
        .map_err(stage("train"))?;
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(config.seed, "train"),
        ..config.train.clone()
    };
    let outcome = train_with_progress(model, &dataset, &train_cfg, |row| {
        progress(&format!(
            "epoch {:>3}  train {:.4}  val {:.4}",
            row.epoch, row.train_nll_per_event, row.val_nll_per_event
        ))
    })
    .map_err(stage("train"))?;

    progress("evaluating");
    let eval_cfg = EvalConfig {
        seed: rng::derive_seed(config.seed, rng::STREAM_EVAL_MC),
        ..config.eval.clone()
    };
    let mut sahp = evaluate(&outcome.model, &test, &eval_cfg, Some(&spec)).map_err(stage("evaluate"))?;
    sahp.attention_map = Some(attention_map(&outcome.model, &test).map_err(stage("evaluate"))?);
    let hp = evaluate(&hp_params, &test, &eval_cfg, Some(&spec)).map_err(stage("evaluate"))?;
    let truth = TrueModel::new(spec.clone())?;
    let truth_nll = nll_per_event(&truth, &test, eval_cfg.mc_samples, eval_cfg.seed, rng::STREAM_EVAL_MC)
        .map_err(stage("evaluate"))?;
    let (mut ll, mut counted) = (0.0, 0);
    for s in &test {
        ll += hp_window_loglik(&hp_params, s).map_err(stage("evaluate"))?;
        counted += s.len().saturating_sub(1);
    }

    let stats = dataset.stats();
    let report = ReproduceReport {
        num_sequences: n,
        split_sizes: (train.len(), val.len(), test.len()),
        mean_length: stats.mean_length,
        nll_table: vec![
            NllRow {
                model: "true process".into(),
                nll_per_event: truth_nll,
            },
            NllRow {
                model: "HP".into(),
                nll_per_event: hp.nll_per_event,
            },
            NllRow {
                model: "SAHP".into(),
                nll_per_event: sahp.nll_per_event,
            },
        ],
        hp_exact_nll_per_event: -ll / counted as f64,
        hp_params: hp_params.clone(),
        sahp,
        hp,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
    };
    Ok(ReproduceOutcome {
        dataset,
        hp_params,
        model: outcome.model,
        history: outcome.history,
        report,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_qq(sahp: &[QqSeries], hp: &[QqSeries], mut w: impl Write) -> Result<()> {
    writeln!(w, "model,type,percentile,q_true,q_est")?;
    for (name, series) in [("SAHP", sahp), ("HP", hp)] {
        for s in series {
            for (p, (t, e)) in s.percentiles.iter().zip(&s.pairs) {
                writeln!(w, "{name},{},{p},{t},{e}", s.type_id)?;
            }
        }
    }
    Ok(())
}

/// Runs [`run_synthetic`] and writes its artifacts into `out_dir`:
/// `config.json`, `dataset.jsonl`, `hp_params.json`, `sahp_checkpoint.json`,
/// `training_history.csv`, `report.json`, `qq.csv` and `attention.csv`.
pub fn reproduce_synthetic(
    config: &ReproduceConfig,
    out_dir: impl AsRef<Path>,
    progress: impl FnMut(&str),
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    config.num_sequences()?;
    fs::create_dir_all(dir)?;
    let out = run_synthetic(config, progress)?;

    let write_json = |name: &str, value: &dyn erased::Json| -> Result<()> {
        let mut w = create(dir, name)?;
        value.write(&mut w)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    };
    write_json("config.json", config)?;
    save_dataset(&out.dataset, dir.join("dataset.jsonl"))?;
    write_json("hp_params.json", &out.hp_params)?;
    save_checkpoint(&out.model, dir.join("sahp_checkpoint.json"))?;
    let mut w = create(dir, "training_history.csv")?;
    write_history_csv(&out.history, &mut w)?;
    w.flush()?;
    write_json("report.json", &out.report)?;
    let mut w = create(dir, "qq.csv")?;
    write_qq(
        out.report.sahp.qq_pairs.as_deref().unwrap_or_default(),
        out.report.hp.qq_pairs.as_deref().unwrap_or_default(),
        &mut w,
    )?;
    w.flush()?;
    if let Some(map) = &out.report.sahp.attention_map {
        let mut w = create(dir, "attention.csv")?;
        write_attention_csv(map, &mut w)?;
        w.flush()?;
    }
    Ok([
        "config.json",
        "dataset.jsonl",
        "hp_params.json",
        "sahp_checkpoint.json",
        "training_history.csv",
        "report.json",
        "qq.csv",
        "attention.csv",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect())
}

mod erased {
    use std::io::Write;

    /// Object-safe pretty JSON writer.
    pub trait Json {
        fn write(&self, w: &mut dyn Write) -> crate::error::Result<()>;
    }

    impl<T: serde::Serialize> Json for T {
        fn write(&self, w: &mut dyn Write) -> crate::error::Result<()> {
            serde_json::to_writer_pretty(w, self)?;
            Ok(())
        }
    }
}
