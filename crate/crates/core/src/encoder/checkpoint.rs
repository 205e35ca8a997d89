//! JSON checkpoint container.
//!
//! Tensors are stored as base64 of their little-endian `f64` bytes, so a
//! save/load round trip is bit-exact, including signed zeros.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::DualEncoder;
use crate::autograd::{ParamKind, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::peft::PeftConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Output of Euclidean pretraining.
    Euclidean,
    /// An assembled (and possibly trained) hyperbolic adaptation.
    Hyperbolic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub model: DualEncoder,
    pub peft: Option<PeftConfig>,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    kind: ParamKind,
    trainable: bool,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format_version: u32,
    kind: CheckpointKind,
    seed: u64,
    model: DualEncoder,
    peft: Option<PeftConfig>,
    tensors: Vec<TensorRecord>,
}

fn encode(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(rec: &TensorRecord) -> Result<Tensor> {
    let bytes = B64
        .decode(&rec.data)
        .map_err(|e| Error::Checkpoint(format!("tensor `{}`: bad base64: {e}", rec.name)))?;
    if bytes.len() != rec.rows * rec.cols * 8 {
        return Err(Error::Checkpoint(format!(
            "tensor `{}`: {} bytes for shape {}x{}",
            rec.name,
            bytes.len(),
            rec.rows,
            rec.cols
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(rec.rows, rec.cols, data)
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| TensorRecord {
                name: name.to_string(),
                kind: p.kind,
                trainable: p.trainable,
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: encode(&p.value),
            })
            .collect();
        let c = Container {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.kind,
            seed: self.seed,
            model: self.model.clone(),
            peft: self.peft.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                c.format_version
            )));
        }
        c.model.config.validate()?;
        let mut params = ParamSet::new();
        for rec in &c.tensors {
            if params.contains(&rec.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", rec.name)));
            }
            params.insert(rec.name.clone(), decode(rec)?, rec.kind, rec.trainable);
        }
        Ok(Self { kind: c.kind, seed: c.seed, model: c.model, peft: c.peft, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
