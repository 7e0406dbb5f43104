use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, OptimizerState};
use super::TrainConfig;
use crate::arrayfile;
use crate::autodiff::Array;
use crate::encoders::{EncoderDims, Model};
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "mixloc-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub metrics: Vec<(String, f64)>,
}

/// Loss at every step plus periodic validation metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    step: u64,
    dims: EncoderDims,
    adam: AdamHyper,
    adam_step: u64,
    config: TrainConfig,
    history: History,
}

impl Checkpoint {
    /// Writes `checkpoint.json` and `tensors.bin` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            format: FORMAT.into(),
            step: self.step,
            dims: self.model.dims(),
            adam: self.optimizer.hyper,
            adam_step: self.optimizer.step,
            config: self.config.clone(),
            history: self.history.clone(),
        };
        let path = dir.join(HEADER_FILE);
        let mut json = serde_json::to_vec_pretty(&header)?;
        json.push(b'\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        arrayfile::write(&dir.join(TENSOR_FILE), &self.tensors())
    }

    fn tensors(&self) -> Vec<(String, Array)> {
        let named = self.model.named_arrays();
        let mut out = named.clone();
        for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for ((name, _), a) in named.iter().zip(moments) {
                out.push((format!("{prefix}.{name}"), a.clone()));
            }
        }
        out
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join(HEADER_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header =
            serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::format(&path, format!("unknown checkpoint format {:?}", header.format)));
        }
        let tpath = dir.join(TENSOR_FILE);
        let tensors = arrayfile::read(&tpath)?;
        let n = tensors.len() / 3;
        if tensors.len() != 3 * n {
            return Err(Error::format(&tpath, format!("{} tensors is not params + two moments", tensors.len())));
        }
        let model = Model::from_named(header.dims, &tensors[..n])?;
        let named = model.named_arrays();
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (slot, prefix) in ["adam.m", "adam.v"].iter().enumerate() {
            for (i, (name, p)) in named.iter().enumerate() {
                let (tn, t) = &tensors[(slot + 1) * n + i];
                if *tn != format!("{prefix}.{name}") || t.shape() != p.shape() {
                    return Err(Error::format(&tpath, format!("unexpected tensor {tn} {:?}", t.shape())));
                }
                moments[slot].push(t.clone());
            }
        }
        let [m, v] = moments;
        Ok(Checkpoint {
            config: header.config,
            model,
            optimizer: OptimizerState { hyper: header.adam, step: header.adam_step, m, v },
            step: header.step,
            history: header.history,
        })
    }
}
