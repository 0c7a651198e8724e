//! Search losses and the static FLOPs/BitOps cost model.
//!
//! The architecture loss is `L1 + η·L_cq + μ(t)·L_e` where `L_cq` is the
//! expected BitOps of the supernet under its current weights, normalized by
//! its value at uniform weights, and `L_e` is the summed per-layer entropy.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpDescriptor;
use crate::supernet::{Genotype, Network, Supernet};
use crate::tensor::{Graph, Tensor, Var};

/// Default image size for BitOps accounting.
pub const BITOPS_IMAGE: (usize, usize) = (32, 32);
/// Default image size for FLOPs accounting.
pub const FLOPS_IMAGE: (usize, usize) = (256, 256);

/// Entries below this contribute nothing to the entropy.
const ENTROPY_FLOOR: f64 = 1e-12;

/// Epochs with the entropy term switched off.
pub const WARMUP_EPOCHS: usize = 2;

/// Mean absolute error.
pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::shape(format!(
            "l1_loss: {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    let d = g.sub(pred, target)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Counting convention for convolution cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one operation.
    #[default]
    Mac,
    /// One multiply-accumulate counts as two operations.
    Double,
}

impl FlopConvention {
    pub fn factor(self) -> f64 {
        match self {
            FlopConvention::Mac => 1.0,
            FlopConvention::Double => 2.0,
        }
    }
}

/// Convolution cost of one op on an `h x w` input, in MACs.
pub fn flops_of(desc: &OpDescriptor, input_hw: (usize, usize)) -> f64 {
    desc.flops(input_hw.0, input_hw.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub block: String,
    pub op: String,
    pub bits: u32,
    pub flops: f64,
    pub bitops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_flops: f64,
    pub total_bitops: f64,
    pub image_hw: (usize, usize),
}

impl CostReport {
    fn from_layers(per_layer: Vec<LayerCost>, image_hw: (usize, usize)) -> Self {
        CostReport {
            total_flops: per_layer.iter().map(|l| l.flops).sum(),
            total_bitops: per_layer.iter().map(|l| l.bitops).sum(),
            per_layer,
            image_hw,
        }
    }

    /// Cost of a genotype for a low-resolution input of `image_hw`.
    pub fn for_genotype(geno: &Genotype, image_hw: (usize, usize), conv: FlopConvention) -> Result<Self> {
        geno.validate()?;
        let sk = geno.skeleton();
        let per_layer = geno
            .layers
            .iter()
            .map(|c| {
                let (cin, cout, hr) = sk.layer_io(c.id());
                let desc = OpDescriptor::parse(&c.op, cin, cout)?;
                let (h, w) = if hr {
                    (image_hw.0 * sk.scale, image_hw.1 * sk.scale)
                } else {
                    image_hw
                };
                let flops = desc.flops(h, w) * conv.factor();
                Ok(LayerCost {
                    layer_id: c.id().to_string(),
                    block: c.block.to_string(),
                    op: c.op.clone(),
                    bits: c.bits,
                    flops,
                    bitops: (c.bits * c.bits) as f64 * flops,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(per_layer, image_hw))
    }

    /// ESPCN (`5x5 3→64`, `3x3 64→32`, `3x3 32→3r²`) at uniform `bits`.
    pub fn espcn(bits: u32, image_hw: (usize, usize), scale: usize, conv: FlopConvention) -> Result<Self> {
        let layers = [
            ("simple 5x5", 3, 64),
            ("simple 3x3", 64, 32),
            ("simple 3x3", 32, 3 * scale * scale),
        ];
        let per_layer = layers
            .iter()
            .enumerate()
            .map(|(i, &(op, cin, cout))| {
                let flops = OpDescriptor::parse(op, cin, cout)?.flops(image_hw.0, image_hw.1) * conv.factor();
                Ok(LayerCost {
                    layer_id: format!("espcn.{i}"),
                    block: "espcn".into(),
                    op: op.into(),
                    bits,
                    flops,
                    bitops: (bits * bits) as f64 * flops,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(per_layer, image_hw))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for l in &self.per_layer {
            wr.serialize(l)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, image_hw: (usize, usize)) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let per_layer = rd.deserialize().collect::<std::result::Result<Vec<LayerCost>, _>>()?;
        Ok(Self::from_layers(per_layer, image_hw))
    }
}

/// `Σ_l Σ_i Σ_b α_ib · b² · F(o_i)` without normalization.
pub fn soft_bitops_inner(g: &mut Graph, net: &Supernet, image_hw: (usize, usize)) -> Result<Var> {
    let scale = net.skeleton().scale;
    let mut acc: Option<Var> = None;
    for l in net.layers() {
        let cost = g.constant(Tensor::from_vec(l.edge_bitops(image_hw.0, image_hw.1, scale)));
        let a = l.alphas(g)?;
        let t = g.mul(a, cost)?;
        let t = g.sum(t)?;
        acc = Some(match acc {
            Some(s) => g.add(s, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::shape("network has no searchable layers"))
}

/// The inner sum at uniform weights on every layer.
pub fn uniform_bitops(net: &Supernet, image_hw: (usize, usize)) -> f64 {
    let scale = net.skeleton().scale;
    net.layers()
        .iter()
        .map(|l| {
            let c = l.edge_bitops(image_hw.0, image_hw.1, scale);
            c.iter().sum::<f64>() / c.len() as f64
        })
        .sum()
}

/// Expected BitOps divided by its value at uniform weights.
pub fn soft_bitops_loss(g: &mut Graph, net: &Supernet, image_hw: (usize, usize)) -> Result<Var> {
    let inner = soft_bitops_inner(g, net, image_hw)?;
    g.scalar_mul(inner, 1.0 / uniform_bitops(net, image_hw))
}

/// `Σ_l H(α_l)` with natural logarithms.
pub fn entropy_loss(g: &mut Graph, net: &Supernet) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in net.layers() {
        let a = l.alphas(g)?;
        let mask: Vec<f64> = g
            .value(a)
            .data()
            .iter()
            .map(|&v| if v >= ENTROPY_FLOOR { 1.0 } else { 0.0 })
            .collect();
        let off = g.constant(Tensor::from_vec(mask.iter().map(|m| 1.0 - m).collect()));
        let mask = g.constant(Tensor::from_vec(mask));
        let safe = g.mul(a, mask)?;
        let safe = g.add(safe, off)?;
        let logs = g.log(safe)?;
        let t = g.mul(a, logs)?;
        let t = g.sum(t)?;
        let h = g.scalar_mul(t, -1.0)?;
        acc = Some(match acc {
            Some(s) => g.add(s, h)?,
            None => h,
        });
    }
    acc.ok_or_else(|| Error::shape("network has no searchable layers"))
}

/// Plain-number entropy of a weight vector.
pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha
        .iter()
        .filter(|&&a| a >= ENTROPY_FLOOR)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub total_epochs: usize,
    pub mu0: f64,
    pub eta: f64,
}

/// `0` during warm-up, then `μ0 · (t/T) · ln(1 + t)`.
pub fn mu_schedule(s: &ScheduleState) -> f64 {
    if s.epoch < WARMUP_EPOCHS || s.total_epochs == 0 {
        return 0.0;
    }
    let t = s.epoch as f64;
    s.mu0 * (t / s.total_epochs as f64) * (1.0 + t).ln()
}

/// `l1 + η·cq + μ·e`.
pub fn total_alpha_loss(g: &mut Graph, l1: Var, cq: Var, e: Var, eta: f64, mu: f64) -> Result<Var> {
    let cq = g.scalar_mul(cq, eta)?;
    let e = g.scalar_mul(e, mu)?;
    let s = g.add(l1, cq)?;
    g.add(s, e)
}

/// Exact cost of the network's discretized path, for checks against
/// [`soft_bitops_inner`] on one-hot weights.
pub fn network_bitops(net: &Network, image_hw: (usize, usize)) -> f64 {
    let scale = net.skeleton().scale;
    net.layers()
        .iter()
        .map(|l| {
            let a = l.alpha_values();
            let c = l.edge_bitops(image_hw.0, image_hw.1, scale);
            a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum()
}
