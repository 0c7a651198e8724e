//! Saved network state: parameter values, normalization statistics and
//! quantizer calibration flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Supernet;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorState {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<TensorState>,
    pub norms: Vec<NormState>,
    /// One flag per edge, in layer order.
    pub calibrated: Vec<bool>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

impl Supernet {
    fn edges(&self) -> impl Iterator<Item = &crate::bitmixer::MixedEdge> {
        self.layers.iter().flat_map(|l| l.edges.iter())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .weight_params()
                .iter()
                .map(|p| {
                    let v = p.value();
                    TensorState {
                        name: p.name(),
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    }
                })
                .collect(),
            norms: self
                .adq
                .iter()
                .enumerate()
                .filter_map(|(i, a)| a.bn().map(|bn| (i, bn)))
                .map(|(i, bn)| {
                    let (mean, var) = bn.running_stats();
                    NormState {
                        name: format!("adq{i}"),
                        mean,
                        var,
                    }
                })
                .collect(),
            calibrated: self.edges().map(|e| e.is_calibrated()).collect(),
        }
    }

    /// Restores a state saved from a network of the same architecture.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let mut by_name: BTreeMap<&str, &TensorState> = BTreeMap::new();
        for t in &ckpt.params {
            by_name.insert(&t.name, t);
        }
        let params = self.weight_params();
        if params.len() != ckpt.params.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} tensors, network has {}",
                ckpt.params.len(),
                params.len()
            )));
        }
        for p in &params {
            let name = p.name();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::shape(format!("checkpoint has no tensor '{name}'")))?;
            if t.shape != p.value().shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor '{name}' has shape {:?}, network expects {:?}",
                    t.shape,
                    p.value().shape()
                )));
            }
            p.set_value(Tensor::new(t.shape.clone(), t.data.clone())?);
        }
        let norms: Vec<_> = self.adq.iter().filter_map(|a| a.bn()).collect();
        if norms.len() != ckpt.norms.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} normalization states, network has {}",
                ckpt.norms.len(),
                norms.len()
            )));
        }
        for (bn, s) in norms.iter().zip(&ckpt.norms) {
            bn.set_running_stats(s.mean.clone(), s.var.clone())?;
        }
        let edges: Vec<_> = self.edges().collect();
        if edges.len() != ckpt.calibrated.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} calibration flags, network has {} edges",
                ckpt.calibrated.len(),
                edges.len()
            )));
        }
        for (e, &c) in edges.iter().zip(&ckpt.calibrated) {
            e.set_calibrated(c);
        }
        Ok(())
    }
}
