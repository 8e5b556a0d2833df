//! Typed event streams, the JSONL dataset format and deterministic splitting.
//!
//! File layout (UTF-8, LF line endings):
//!
//! ```text
//! {"num_types":2}
//! {"horizon":10.0,"events":[{"type":0,"time":0.5},{"type":1,"time":2.25}]}
//! {"horizon":7.5,"events":[],"split":"test"}
//! ```
//!
//! `horizon` may be omitted, in which case it defaults to the last event time.
//! `split` is optional but must then be present on every sequence line.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub type_id: usize,
    pub time: f64,
}

impl Event {
    pub fn new(type_id: usize, time: f64) -> Self {
        Self { type_id, time }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub events: Vec<Event>,
    pub horizon: f64,
}

impl Sequence {
    pub fn new(events: Vec<Event>, horizon: f64) -> Self {
        Self { events, horizon }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// N_u(t): number of type-`u` events with time ≤ `t`.
    pub fn count(&self, type_id: usize, t: f64) -> usize {
        self.events
            .iter()
            .take_while(|e| e.time <= t)
            .filter(|e| e.type_id == type_id)
            .count()
    }

    /// Events strictly before `t`.
    pub fn history_before(&self, t: f64) -> &[Event] {
        let n = self.events.partition_point(|e| e.time < t);
        &self.events[..n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_types: usize,
    pub sequences: Vec<Sequence>,
    /// One label per sequence when present.
    pub splits: Option<Vec<Split>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub num_types: usize,
    pub num_sequences: usize,
    pub total_events: usize,
    pub min_length: usize,
    pub mean_length: f64,
    pub max_length: usize,
    pub type_counts: Vec<usize>,
    pub split_sizes: BTreeMap<Split, usize>,
}

impl Dataset {
    pub fn new(num_types: usize, sequences: Vec<Sequence>) -> Result<Self> {
        let ds = Self {
            num_types,
            sequences,
            splits: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 {
            return Err(Error::Validation("num_types must be at least 1".into()));
        }
        for (k, seq) in self.sequences.iter().enumerate() {
            if let Some(v) = validate_sequence(seq, self.num_types).first() {
                return Err(Error::Validation(format!("sequence {k}: {v}")));
            }
        }
        if let Some(splits) = &self.splits {
            if splits.len() != self.sequences.len() {
                return Err(Error::Validation(format!(
                    "{} split labels for {} sequences",
                    splits.len(),
                    self.sequences.len()
                )));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> DatasetStats {
        let lengths: Vec<usize> = self.sequences.iter().map(Sequence::len).collect();
        let total: usize = lengths.iter().sum();
        let mut type_counts = vec![0; self.num_types];
        for e in self.sequences.iter().flat_map(|s| &s.events) {
            type_counts[e.type_id] += 1;
        }
        let mut split_sizes = BTreeMap::new();
        if let Some(splits) = &self.splits {
            for s in splits {
                *split_sizes.entry(*s).or_insert(0) += 1;
            }
        }
        DatasetStats {
            num_types: self.num_types,
            num_sequences: lengths.len(),
            total_events: total,
            min_length: lengths.iter().copied().min().unwrap_or(0),
            mean_length: if lengths.is_empty() {
                0.0
            } else {
                total as f64 / lengths.len() as f64
            },
            max_length: lengths.iter().copied().max().unwrap_or(0),
            type_counts,
            split_sizes,
        }
    }

    /// Sequences carrying the given label, in file order.
    pub fn split(&self, which: Split) -> Vec<&Sequence> {
        match &self.splits {
            Some(labels) => self
                .sequences
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == which)
                .map(|(s, _)| s)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Dataset restricted to one split (labels dropped).
    pub fn subset(&self, which: Split) -> Dataset {
        Dataset {
            num_types: self.num_types,
            sequences: self.split(which).into_iter().cloned().collect(),
            splits: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonPositiveHorizon,
    InvalidTime,
    NotIncreasing,
    OutsideWindow,
    TypeOutOfRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Index of the first offending event, if the violation concerns events.
    pub index: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::NonPositiveHorizon => "horizon not positive and finite",
            ViolationKind::InvalidTime => "time negative or not finite",
            ViolationKind::NotIncreasing => "not strictly increasing",
            ViolationKind::OutsideWindow => "time outside (0, horizon]",
            ViolationKind::TypeOutOfRange => "type out of range",
        };
        match self.index {
            Some(i) => write!(f, "{what} at index {i}"),
            None => f.write_str(what),
        }
    }
}

/// Every violated sequence invariant, each with its first offending event.
pub fn validate_sequence(seq: &Sequence, num_types: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(seq.horizon.is_finite() && seq.horizon > 0.0) {
        out.push(Violation {
            kind: ViolationKind::NonPositiveHorizon,
            index: None,
        });
    }
    let first = |pred: &dyn Fn(usize, &Event) -> bool| {
        seq.events.iter().enumerate().find(|(i, e)| pred(*i, e)).map(|(i, _)| i)
    };
    let checks: [(ViolationKind, Option<usize>); 4] = [
        (
            ViolationKind::InvalidTime,
            first(&|_, e| !(e.time.is_finite() && e.time >= 0.0)),
        ),
        (
            ViolationKind::NotIncreasing,
            first(&|i, e| i > 0 && !(e.time > seq.events[i - 1].time)),
        ),
        (
            ViolationKind::OutsideWindow,
            first(&|_, e| !(e.time > 0.0 && e.time <= seq.horizon)),
        ),
        (
            ViolationKind::TypeOutOfRange,
            first(&|_, e| e.type_id >= num_types),
        ),
    ];
    for (kind, index) in checks {
        if let Some(i) = index {
            out.push(Violation {
                kind,
                index: Some(i),
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_types: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
    events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

pub fn load_dataset(path: impl AsRef<Path>, expected_types: Option<usize>) -> Result<Dataset> {
    let file = fs::File::open(path.as_ref())?;
    read_dataset(BufReader::new(file), expected_types)
}

pub fn read_dataset(reader: impl BufRead, expected_types: Option<usize>) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    if let Some(expected) = expected_types {
        if expected != header.num_types {
            return Err(Error::TypeCountMismatch {
                expected,
                found: header.num_types,
            });
        }
    }

    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let horizon = match (rec.horizon, rec.events.last()) {
            (Some(h), _) => h,
            (None, Some(last)) => last.time,
            (None, None) => {
                return Err(Error::Validation(format!(
                    "sequence {} (line {}): no horizon and no events",
                    sequences.len(),
                    i + 1
                )))
            }
        };
        splits.push(rec.split);
        sequences.push(Sequence::new(rec.events, horizon));
    }

    let labelled = splits.iter().filter(|s| s.is_some()).count();
    let splits = if labelled == 0 {
        None
    } else if labelled == splits.len() {
        Some(splits.into_iter().flatten().collect())
    } else {
        return Err(Error::Validation(
            "split labels must be given for all sequences or none".into(),
        ));
    };

    let ds = Dataset {
        num_types: header.num_types,
        sequences,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(dataset: &Dataset, mut w: impl Write) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            num_types: dataset.num_types,
        },
    )?;
    w.write_all(b"\n")?;
    for (k, seq) in dataset.sequences.iter().enumerate() {
        let line = SequenceLine {
            horizon: Some(seq.horizon),
            events: seq.events.clone(),
            split: dataset.splits.as_ref().map(|s| s[k]),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let file = fs::File::create(path.as_ref())?;
    write_dataset(dataset, BufWriter::new(file))
}

/// Assigns train/val/test labels. The assignment depends only on the multiset of
/// sequences and the seed: sequences are put in a canonical content order
/// before the seeded shuffle. Val and test sizes are floored; train takes the rest.
pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (tr, va, te) = fractions;
    let all = [tr, va, te];
    if all.iter().any(|f| !(f.is_finite() && *f > 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let n = dataset.sequences.len();
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let n_train = n - n_val - n_test;

    let keys: Vec<String> = dataset.sequences.iter().map(canonical_key).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    order.shuffle(&mut rng::stream_rng(seed, rng::STREAM_SPLIT));

    let mut labels = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        labels[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        num_types: dataset.num_types,
        sequences: dataset.sequences.clone(),
        splits: Some(labels),
    })
}

fn canonical_key(seq: &Sequence) -> String {
    let mut key = format!("{:016x}", seq.horizon.to_bits());
    for e in &seq.events {
        key.push_str(&format!("|{}:{:016x}", e.type_id, e.time.to_bits()));
    }
    key
}
