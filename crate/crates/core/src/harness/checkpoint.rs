//! Single-file checkpoints: a magic line, one JSON header line with names,
//! shapes and offsets, then every tensor as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::training::{OptimizerState, TrainState};

pub const CHECKPOINT_MAGIC: &str = "thoughtctl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

/// Data order and dropout masks are derived from the seed and the step
/// counter, so these two values are the whole random state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub scheme: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RunConfig,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    total_values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn groups(state: &TrainState) -> [&ModelParams; 3] {
    [&state.params, &state.opt.m, &state.opt.v]
}

impl Checkpoint {
    pub fn rng_state(&self) -> RngState {
        RngState {
            scheme: "chacha8-derived(seed, step)".into(),
            seed: self.config.train.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (g, p) in GROUPS.iter().zip(groups(&self.state)) {
            for (name, t) in p.leaves() {
                tensors.push(TensorEntry {
                    name: format!("{g}.{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.state.step(),
            rng: self.rng_state(),
            tensors,
            total_values: offset,
        };
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.reserve(offset * 8);
        for p in groups(&self.state) {
            p.visit(&mut |_, t| {
                t.data()
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
            });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let format = |m: String| HarnessError::Format(m);
        let (magic, rest) = split_line(bytes).ok_or_else(|| format("missing magic line".into()))?;
        let magic =
            std::str::from_utf8(magic).map_err(|_| format("magic line is not text".into()))?;
        let version = magic
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| format(format!("not a checkpoint (first line {magic:?})")))?;
        if version != CHECKPOINT_VERSION {
            return Err(HarnessError::Mismatch {
                what: "checkpoint version".into(),
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let (header, data) = split_line(rest).ok_or_else(|| format("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| format(format!("bad header: {e}")))?;
        if data.len() != header.total_values * 8 {
            return Err(format(format!(
                "expected {} bytes of tensor data, found {}",
                header.total_values * 8,
                data.len()
            )));
        }
        let model = header.config.effective_model();
        let mut entries = header.tensors.iter();
        let mut out = Vec::with_capacity(3);
        for g in GROUPS {
            let mut p = ModelParams::zeros(&model)?;
            let mut err = None;
            p.visit_mut(&mut |name, t| {
                if err.is_some() {
                    return;
                }
                let expected = format!("{g}.{name}");
                match entries.next() {
                    Some(e)
                        if e.name == expected
                            && e.shape == t.shape()
                            && e.offset + t.len() <= header.total_values =>
                    {
                        let raw = &data[e.offset * 8..(e.offset + t.len()) * 8];
                        let values = raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect();
                        *t = Tensor::new(t.shape(), values).expect("shape checked");
                    }
                    Some(e) => {
                        err = Some(HarnessError::Mismatch {
                            what: "tensor".into(),
                            expected: format!("{expected} {:?}", t.shape()),
                            found: format!("{} {:?}", e.name, e.shape),
                        })
                    }
                    None => err = Some(format(format!("missing tensor {expected}"))),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            out.push(p);
        }
        if let Some(e) = entries.next() {
            return Err(format(format!("unexpected tensor {}", e.name)));
        }
        let v = out.pop().expect("three groups");
        let m = out.pop().expect("three groups");
        let params = out.pop().expect("three groups");
        Ok(Self {
            config: header.config,
            state: TrainState {
                params,
                opt: OptimizerState {
                    m,
                    v,
                    step: header.step,
                },
            },
        })
    }
}

fn split_line(b: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = b.iter().position(|&c| c == b'\n')?;
    Some((&b[..i], &b[i + 1..]))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    super::write_file(path, &ckpt.to_bytes())
}

/// Loads a checkpoint; with `expected`, rejects one built for another model.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(exp) = expected {
        let found = ckpt.config.effective_model();
        if &found != exp {
            return Err(HarnessError::Mismatch {
                what: "model config".into(),
                expected: serde_json::to_string(exp).expect("config serializes"),
                found: serde_json::to_string(&found).expect("config serializes"),
            });
        }
    }
    Ok(ckpt)
}
