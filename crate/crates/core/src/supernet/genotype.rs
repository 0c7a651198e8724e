//! Discretized architectures and their JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, LayerId, LayerPlan, Skeleton, Supernet};
use crate::bitmixer::FULL_PRECISION_BITS;
use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::quant::check_bits;

pub const SPACE_VERSION: u32 = 1;

/// Weights closer than this to the maximum count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerChoice {
    pub block: Block,
    pub index: usize,
    pub op: String,
    pub bits: u32,
}

impl LayerChoice {
    pub fn id(&self) -> LayerId {
        LayerId {
            block: self.block,
            index: self.index,
        }
    }
}

/// One `(op, bits)` choice per searchable layer plus the skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub space_version: u32,
    pub channels: usize,
    #[serde(rename = "K")]
    pub body_repeats: usize,
    pub scale: usize,
    pub layers: Vec<LayerChoice>,
    /// Largest minus second-largest weight per layer at discretization.
    #[serde(default)]
    pub alpha_margins: Vec<f64>,
}

impl Genotype {
    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            channels: self.channels,
            body_repeats: self.body_repeats,
            scale: self.scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.space_version != SPACE_VERSION {
            return Err(Error::config(format!(
                "genotype space_version {} (expected {SPACE_VERSION})",
                self.space_version
            )));
        }
        let sk = self.skeleton();
        sk.validate()?;
        let ids = sk.layer_ids();
        if ids.len() != self.layers.len() {
            return Err(Error::config(format!(
                "genotype has {} layers, skeleton needs {}",
                self.layers.len(),
                ids.len()
            )));
        }
        for (i, (c, id)) in self.layers.iter().zip(&ids).enumerate() {
            if c.id() != *id {
                return Err(Error::config(format!("layers[{i}]: expected {id}, found {}", c.id())));
            }
            OpKind::parse(&c.op).map_err(|e| Error::config(format!("layers[{i}].op: {e}")))?;
            if c.bits != FULL_PRECISION_BITS {
                check_bits(c.bits).map_err(|e| Error::config(format!("layers[{i}].bits: {e}")))?;
            }
        }
        if !self.alpha_margins.is_empty() && self.alpha_margins.len() != self.layers.len() {
            return Err(Error::config("alpha_margins must have one entry per layer"));
        }
        Ok(())
    }

    pub(super) fn check_skeleton(&self, sk: &Skeleton) -> Result<()> {
        self.validate()?;
        if self.skeleton() != *sk {
            return Err(Error::config(format!(
                "genotype skeleton {:?} does not match network {:?}",
                self.skeleton(),
                sk
            )));
        }
        Ok(())
    }

    /// Single-candidate plans for instantiation.
    pub fn plans(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        Ok(self
            .layers
            .iter()
            .map(|c| LayerPlan {
                id: c.id(),
                ops: vec![c.op.clone()],
                bits: vec![c.bits],
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Same architecture with a uniform bit width on every quantized layer.
    pub fn with_uniform_bits(&self, bits: u32) -> Genotype {
        let mut g = self.clone();
        for c in &mut g.layers {
            if c.bits != FULL_PRECISION_BITS {
                c.bits = bits;
            }
        }
        g
    }
}

/// Per layer, the `(op, bit)` entry with the largest weight. Ties go to the
/// lowest BitOps at `cost_hw`, then to catalog order.
pub fn discretize(net: &Supernet, cost_hw: (usize, usize)) -> Genotype {
    let sk = net.skeleton();
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut margins = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let a = l.alpha_values();
        let cost = l.edge_bitops(cost_hw.0, cost_hw.1, sk.scale);
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best = (0..a.len())
            .filter(|&i| a[i] >= max - TIE_TOLERANCE)
            .min_by(|&i, &j| cost[i].total_cmp(&cost[j]).then(i.cmp(&j)))
            .expect("non-empty weight vector");
        let second = (0..a.len())
            .filter(|&i| i != best)
            .map(|i| a[i])
            .fold(0.0, f64::max);
        margins.push(a[best] - second);
        let nb = l.bits().len();
        layers.push(LayerChoice {
            block: l.id().block,
            index: l.id().index,
            op: l.edges()[best / nb].desc().name(),
            bits: l.bits()[best % nb],
        });
    }
    Genotype {
        space_version: SPACE_VERSION,
        channels: sk.channels,
        body_repeats: sk.body_repeats,
        scale: sk.scale,
        layers,
        alpha_margins: margins,
    }
}
