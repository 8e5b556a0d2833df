use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sahp_core::classic_hp::{hp_fit, FitOptions, HawkesParams};
use sahp_core::data::{load_dataset, save_dataset, split_dataset, Dataset, Sequence, Split};
use sahp_core::eval::{
    attention_map, evaluate as eval_model, intensity_qq, predict_sequence, write_attention_csv, write_predictions_csv,
    write_qq_csv, EvalConfig,
};
use sahp_core::intensity::IntensityModel;
use sahp_core::model::{read_checkpoint, save_checkpoint, EncodingMode, SahpConfig, SahpModel};
use sahp_core::pipeline::{reproduce_synthetic, ReproduceConfig};
use sahp_core::rng;
use sahp_core::simulator::{simulate_dataset, HawkesSpec};
use sahp_core::training::{train_with_progress, write_history_csv, TrainConfig};

use crate::{EvaluateArgs, FitHpArgs, ModelDataArgs, QqArgs, ReproduceArgs, SimulateArgs, TrainArgs};

/// Bad flags or config values; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Global {
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            None => Ok(T::default()),
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
            }
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("missing --{flag} (flag or config)")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// `dir/name.jsonl` → `dir/name.config.json`.
fn config_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn load_spec(path: Option<&Path>) -> Result<HawkesSpec> {
    let spec = match path {
        None => HawkesSpec::synthetic_two_type(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path, None).with_context(|| format!("loading dataset {}", path.display()))
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

/// The requested split; without a request, the test split of a labelled
/// dataset or every sequence of an unlabelled one.
fn select<'a>(data: &'a Dataset, split: Option<&str>) -> Result<Vec<&'a Sequence>> {
    let which = match split {
        Some(s) => Some(parse_split(s)?),
        None => data.splits.as_ref().map(|_| Split::Test),
    };
    let seqs = match which {
        Some(w) if data.splits.is_none() => return Err(usage(format!("dataset has no split labels; cannot select {w}"))),
        Some(w) => data.split(w),
        None => data.sequences.iter().collect(),
    };
    if seqs.is_empty() {
        return Err(usage("selected split is empty"));
    }
    Ok(seqs)
}

enum LoadedModel {
    Sahp(SahpModel),
    Hawkes(HawkesParams),
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing model {}", path.display()))?;
    if value.get("format").and_then(|f| f.as_str()) == Some("sahp-checkpoint") {
        let model = read_checkpoint(bytes.as_slice()).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok(LoadedModel::Sahp(model))
    } else {
        let params: HawkesParams =
            serde_json::from_value(value).with_context(|| format!("parsing Hawkes parameters {}", path.display()))?;
        params.validate()?;
        Ok(LoadedModel::Hawkes(params))
    }
}

macro_rules! with_model {
    ($m:expr, |$x:ident| $body:expr) => {
        match $m {
            LoadedModel::Sahp($x) => $body,
            LoadedModel::Hawkes($x) => $body,
        }
    };
}

fn check_types<M: IntensityModel>(model: &M, data: &Dataset) -> Result<()> {
    if model.num_types() != data.num_types {
        return Err(sahp_core::Error::TypeCountMismatch {
            expected: model.num_types(),
            found: data.num_types,
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    pub spec: Option<PathBuf>,
    pub horizon: f64,
    pub n: usize,
    pub split: Option<(f64, f64, f64)>,
    pub out: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            spec: None,
            horizon: 100.0,
            n: 500,
            split: None,
            out: None,
        }
    }
}

pub fn simulate(g: &Global, a: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = g.load()?;
    set(&mut cfg.seed, g.seed);
    set_opt(&mut cfg.spec, a.spec);
    set(&mut cfg.horizon, a.horizon);
    set(&mut cfg.n, a.n);
    if let Some(v) = a.split {
        if v.len() != 3 {
            return Err(usage("--split takes three comma-separated fractions"));
        }
        cfg.split = Some((v[0], v[1], v[2]));
    }
    set_opt(&mut cfg.out, a.out);
    let out = required(&cfg.out, "out")?.to_path_buf();

    let spec = load_spec(cfg.spec.as_deref())?;
    let mut data = simulate_dataset(&spec, cfg.horizon, cfg.n, rng::derive_seed(cfg.seed, rng::STREAM_SIMULATION))?;
    if let Some(fr) = cfg.split {
        data = split_dataset(&data, fr, rng::derive_seed(cfg.seed, rng::STREAM_SPLIT))?;
    }
    ensure_parent(&out)?;
    save_dataset(&data, &out)?;
    write_json(&config_path_for(&out), &cfg)?;
    let stats = data.stats();
    eprintln!(
        "wrote {} sequences ({} events, mean length {:.1}) to {}",
        stats.num_sequences,
        stats.total_events,
        stats.mean_length,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitHpConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub fit: FitOptions,
}

pub fn fit_hp(g: &Global, a: FitHpArgs) -> Result<()> {
    let mut cfg: FitHpConfig = g.load()?;
    set_opt(&mut cfg.data, a.data);
    set_opt(&mut cfg.out_dir, a.out_dir);
    set(&mut cfg.fit.max_iterations, a.max_iterations);
    cfg.fit.shared_decay |= a.shared_decay;
    let data = load_data(required(&cfg.data, "data")?)?;
    let dir = required(&cfg.out_dir, "out-dir")?.to_path_buf();

    let train: Vec<&Sequence> = match data.splits {
        Some(_) => data.split(Split::Train),
        None => data.sequences.iter().collect(),
    };
    let init = HawkesParams::initial_guess(&train, data.num_types);
    let (params, diag) = hp_fit(&data, &init, &cfg.fit)?;
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("hp_params.json"), &params)?;
    let mut w = create(&dir.join("hp_fit.csv"))?;
    diag.write_csv(&mut w)?;
    w.flush()?;
    write_json(&dir.join("config.json"), &cfg)?;
    eprintln!(
        "fit finished after {} iterations (converged: {}), train NLL/event {:.4}",
        diag.iterations, diag.converged, diag.final_nll
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// `num_types` is taken from the dataset.
    pub model: SahpConfig,
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let r = ReproduceConfig::default();
        Self {
            seed: 0,
            data: None,
            out_dir: None,
            model: r.model,
            train: r.train,
        }
    }
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let mut cfg: TrainCmdConfig = g.load()?;
    set(&mut cfg.seed, g.seed);
    set_opt(&mut cfg.data, a.data);
    set_opt(&mut cfg.out_dir, a.out_dir);
    let m = &mut cfg.model;
    set(&mut m.model_dim, a.model_dim);
    set(&mut m.num_heads, a.heads);
    set(&mut m.num_layers, a.layers);
    set(&mut m.dropout, a.dropout);
    set(&mut m.intensity_scale, a.intensity_scale);
    if let Some(e) = a.encoding {
        m.encoding_mode = match e.as_str() {
            "time_shifted" => EncodingMode::TimeShifted,
            "conventional" => EncodingMode::Conventional,
            other => return Err(usage(format!("unknown encoding {other:?}"))),
        };
    }
    let t = &mut cfg.train;
    set(&mut t.learning_rate, a.lr);
    set(&mut t.warmup_steps, a.warmup);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.max_epochs, a.epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.mc_samples, a.mc_samples);
    cfg.train.seed = rng::derive_seed(cfg.seed, "train");

    let data = load_data(required(&cfg.data, "data")?)?;
    let dir = required(&cfg.out_dir, "out-dir")?.to_path_buf();
    cfg.model.num_types = data.num_types;
    let model = SahpModel::init(cfg.model.clone(), rng::derive_seed(cfg.seed, rng::STREAM_INIT))?;
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let outcome = train_with_progress(model, &data, &cfg.train, |row| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}",
            row.epoch, row.train_nll_per_event, row.val_nll_per_event
        )
    })?;
    save_checkpoint(&outcome.model, dir.join("checkpoint.json"))?;
    let mut w = create(&dir.join("history.csv"))?;
    write_history_csv(&outcome.history, &mut w)?;
    w.flush()?;
    eprintln!(
        "best epoch {} with validation NLL/event {:.4}",
        outcome.best_epoch, outcome.best_val_nll
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval: EvalConfig,
}

fn merge_io(
    model: &mut Option<PathBuf>,
    data: &mut Option<PathBuf>,
    split: &mut Option<String>,
    out: &mut Option<PathBuf>,
    a: ModelDataArgs,
) {
    set_opt(model, a.model);
    set_opt(data, a.data);
    set_opt(split, a.split);
    set_opt(out, a.out);
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = g.load()?;
    set(&mut cfg.seed, g.seed);
    merge_io(&mut cfg.model, &mut cfg.data, &mut cfg.split, &mut cfg.out, a.io);
    set_opt(&mut cfg.spec, a.spec);
    set(&mut cfg.eval.mc_samples, a.mc_samples);
    cfg.eval.seed = rng::derive_seed(cfg.seed, rng::STREAM_EVAL_MC);

    let model = load_model(required(&cfg.model, "model")?)?;
    let data = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let seqs = select(&data, cfg.split.as_deref())?;
    let spec = cfg.spec.as_deref().map(|p| load_spec(Some(p))).transpose()?;
    let report = with_model!(&model, |m| {
        check_types(m, &data)?;
        eval_model(m, &seqs, &cfg.eval, spec.as_ref())?
    });
    ensure_parent(&out)?;
    write_json(&out, &report)?;
    write_json(&config_path_for(&out), &cfg)?;
    eprintln!(
        "NLL/event {:.4}  macro-F1 {:.4}  RMSE(scaled) {:.4}  over {} predictions",
        report.nll_per_event, report.macro_f1, report.rmse_scaled, report.num_predictions
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub out: Option<PathBuf>,
    pub quadrature: sahp_core::eval::QuadratureConfig,
}

pub fn predict(g: &Global, a: ModelDataArgs) -> Result<()> {
    let mut cfg: PredictConfig = g.load()?;
    merge_io(&mut cfg.model, &mut cfg.data, &mut cfg.split, &mut cfg.out, a);
    cfg.quadrature.validate()?;
    let model = load_model(required(&cfg.model, "model")?)?;
    let data = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let seqs = select(&data, cfg.split.as_deref())?;
    let preds = with_model!(&model, |m| {
        check_types(m, &data)?;
        seqs.iter()
            .map(|s| predict_sequence(m, s, &cfg.quadrature))
            .collect::<sahp_core::Result<Vec<_>>>()?
    });
    ensure_parent(&out)?;
    let mut w = create(&out)?;
    write_predictions_csv(&seqs, &preds, data.num_types, &mut w)?;
    w.flush()?;
    write_json(&config_path_for(&out), &cfg)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QqConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub percentiles: Vec<f64>,
}

impl Default for QqConfig {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            split: None,
            spec: None,
            out: None,
            percentiles: sahp_core::eval::default_percentiles(),
        }
    }
}

pub fn qq(g: &Global, a: QqArgs) -> Result<()> {
    let mut cfg: QqConfig = g.load()?;
    merge_io(&mut cfg.model, &mut cfg.data, &mut cfg.split, &mut cfg.out, a.io);
    set_opt(&mut cfg.spec, a.spec);
    let model = load_model(required(&cfg.model, "model")?)?;
    let data = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let seqs = select(&data, cfg.split.as_deref())?;
    let spec = load_spec(cfg.spec.as_deref())?;
    let series = with_model!(&model, |m| {
        check_types(m, &data)?;
        intensity_qq(m, &spec, &seqs, &cfg.percentiles)?
    });
    ensure_parent(&out)?;
    let mut w = create(&out)?;
    write_qq_csv(&series, &mut w)?;
    w.flush()?;
    write_json(&config_path_for(&out), &cfg)?;
    for s in &series {
        eprintln!("type {}: mean |q_est - q_true| over 5..95 = {:.4}", s.type_id, s.mean_abs_deviation(5.0, 95.0));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn attn(g: &Global, a: ModelDataArgs) -> Result<()> {
    let mut cfg: AttnConfig = g.load()?;
    merge_io(&mut cfg.model, &mut cfg.data, &mut cfg.split, &mut cfg.out, a);
    let model = match load_model(required(&cfg.model, "model")?)? {
        LoadedModel::Sahp(m) => m,
        LoadedModel::Hawkes(_) => return Err(usage("attention maps need a SAHP checkpoint")),
    };
    let data = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let seqs = select(&data, cfg.split.as_deref())?;
    check_types(&model, &data)?;
    let map = attention_map(&model, &seqs)?;
    ensure_parent(&out)?;
    let mut w = create(&out)?;
    write_attention_csv(&map, &mut w)?;
    w.flush()?;
    write_json(&config_path_for(&out), &cfg)?;
    Ok(())
}

/// The output directory is a flag only; `config.json` in it holds the
/// resolved run config and reproduces the run when passed back via `--config`.
pub fn reproduce(g: &Global, a: ReproduceArgs) -> Result<()> {
    let mut cfg: ReproduceConfig = g.load()?;
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.scale, a.scale);
    set(&mut cfg.horizon, a.horizon);
    set(&mut cfg.train.max_epochs, a.epochs);
    let dir = required(&a.out_dir, "out-dir")?.to_path_buf();
    let files = reproduce_synthetic(&cfg, &dir, |msg| eprintln!("{msg}"))?;
    let report: sahp_core::pipeline::ReproduceReport =
        serde_json::from_slice(&fs::read(dir.join("report.json"))?)?;
    for row in &report.nll_table {
        eprintln!("{:<14} test NLL/event {:.4}", row.model, row.nll_per_event);
    }
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}
