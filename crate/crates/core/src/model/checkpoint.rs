//! Checkpoint container: a JSON document holding the model configuration and a
//! manifest of named tensors. Each tensor's values are stored as base64 of its
//! little-endian `f64` bytes, so a save/load cycle is bit-exact.
//!
//! ```json
//! {"format": "sahp-checkpoint", "version": 1, "config": {...},
//!  "tensors": [{"name": "type_embedding", "shape": [2, 16], "dtype": "f64", "data": "..."}]}
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{ModelParams, SahpConfig, SahpModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "sahp-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub config: SahpConfig,
    tensors: Vec<TensorEntry>,
}

fn encode_tensor(name: &str, t: &Tensor) -> TensorEntry {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    TensorEntry {
        name: name.to_string(),
        shape: [t.rows(), t.cols()],
        dtype: "f64".into(),
        data: STANDARD.encode(bytes),
    }
}

fn decode_tensor(e: &TensorEntry) -> Result<Tensor> {
    if e.dtype != "f64" {
        return Err(Error::Validation(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
    }
    let bytes = STANDARD
        .decode(&e.data)
        .map_err(|err| Error::Validation(format!("tensor {}: {err}", e.name)))?;
    let [rows, cols] = e.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Validation(format!(
            "tensor {}: {} bytes do not match shape {rows}x{cols}",
            e.name,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

impl Checkpoint {
    pub fn from_model(model: &SahpModel) -> Self {
        let omega = Tensor::from_vec(1, model.params.omega.len(), model.params.omega.clone());
        let mut tensors = vec![encode_tensor("omega", &omega)];
        tensors.extend(
            model
                .params
                .trainable()
                .into_iter()
                .map(|(name, t)| encode_tensor(&name, t)),
        );
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<SahpModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Validation(format!(
                "not a version {VERSION} {FORMAT} file (found {} v{})",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        // Build a template with the right structure, then overwrite by name.
        let mut params = ModelParams::init(&self.config, 0)?;
        let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
        let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
            self.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Validation("duplicate tensor names in checkpoint".into()));
        }
        let omega = by_name
            .remove("omega")
            .ok_or_else(|| Error::Validation("checkpoint lacks tensor omega".into()))?;
        params.omega = decode_tensor(omega)?.into_data();
        for (name, slot) in names.iter().zip(params.trainable_mut()) {
            let entry = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))?;
            *slot = decode_tensor(entry)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Validation(format!("unexpected tensor {extra} in checkpoint")));
        }
        params
            .validate(&self.config)
            .map_err(|e| Error::Validation(format!("checkpoint: {e}")))?;
        Ok(SahpModel {
            config: self.config,
            params,
        })
    }
}

pub fn write_checkpoint<W: Write>(model: &SahpModel, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &Checkpoint::from_model(model))?;
    writeln!(w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<SahpModel> {
    let ck: Checkpoint = serde_json::from_reader(r)?;
    ck.into_model()
}

pub fn save_checkpoint(model: &SahpModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SahpModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
