//! Candidate convolution operations of the search space.
//!
//! Catalog names follow the `simple KxK [grouped G]` and `conv Kx1 1xK`
//! conventions. A separable `conv Kx1 1xK` is a depthwise `Kx1` convolution
//! followed by a full `1xK` convolution; both kernels count as the op's
//! weights and are quantized together.

use std::cell::Cell;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Graph, Param, ParamGroup, Tensor, Var};

thread_local! {
    static OP_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of candidate-operation evaluations on this thread. A separable op
/// counts once even though it runs two convolutions.
pub fn op_eval_count() -> u64 {
    OP_EVALS.with(|c| c.get())
}

pub fn reset_op_eval_count() {
    OP_EVALS.with(|c| c.set(0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `simple KxK`, optionally `grouped G`.
    Simple { k: usize, groups: usize },
    /// `conv Kx1 1xK`.
    Separable { k: usize },
}

impl OpKind {
    pub fn parse(name: &str) -> Result<Self> {
        let words: Vec<&str> = name.split_whitespace().collect();
        let square = |s: &str| -> Option<usize> {
            let (a, b) = s.split_once('x')?;
            let (a, b) = (a.parse::<usize>().ok()?, b.parse::<usize>().ok()?);
            (a == b && a % 2 == 1).then_some(a)
        };
        let parsed = match words.as_slice() {
            ["simple", k] => square(k).map(|k| OpKind::Simple { k, groups: 1 }),
            ["simple", k, "grouped", g] => square(k)
                .zip(g.parse::<usize>().ok().filter(|&g| g > 0))
                .map(|(k, groups)| OpKind::Simple { k, groups }),
            ["conv", a, b] => {
                let k1 = a.strip_suffix("x1").and_then(|k| k.parse::<usize>().ok());
                let k2 = b.strip_prefix("1x").and_then(|k| k.parse::<usize>().ok());
                match (k1, k2) {
                    (Some(k1), Some(k2)) if k1 == k2 && k1 % 2 == 1 => Some(OpKind::Separable { k: k1 }),
                    _ => None,
                }
            }
            _ => None,
        };
        parsed.ok_or_else(|| Error::config(format!("unknown operation '{name}'")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Simple { k, groups: 1 } => write!(f, "simple {k}x{k}"),
            OpKind::Simple { k, groups } => write!(f, "simple {k}x{k} grouped {groups}"),
            OpKind::Separable { k } => write!(f, "conv {k}x1 1x{k}"),
        }
    }
}

/// One convolution stage: kernel shape and convolution parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub params: ConvParams,
}

impl ConvStage {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.params.groups, self.kh, self.kw]
    }

    /// Multiply-accumulate count at output size `oh x ow`.
    pub fn macs(&self, oh: usize, ow: usize) -> f64 {
        (self.kh * self.kw * (self.cin / self.params.groups) * self.cout * oh * ow) as f64
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.params;
        (
            (h + 2 * p.padding.0 - self.kh) / p.stride + 1,
            (w + 2 * p.padding.1 - self.kw) / p.stride + 1,
        )
    }
}

/// Largest divisor of `gcd(cin, cout)` not exceeding `requested`.
fn effective_groups(requested: usize, cin: usize, cout: usize) -> usize {
    let g = gcd(cin, cout);
    (1..=requested.min(g)).rev().find(|d| g % d == 0).unwrap_or(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A catalog operation bound to channel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpDescriptor {
    pub kind: OpKind,
    pub cin: usize,
    pub cout: usize,
}

impl OpDescriptor {
    pub fn new(kind: OpKind, cin: usize, cout: usize) -> Self {
        OpDescriptor { kind, cin, cout }
    }

    pub fn parse(name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self::new(OpKind::parse(name)?, cin, cout))
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    pub fn stages(&self) -> Vec<ConvStage> {
        match self.kind {
            OpKind::Simple { k, groups } => vec![ConvStage {
                cout: self.cout,
                cin: self.cin,
                kh: k,
                kw: k,
                params: ConvParams::same(k, k, effective_groups(groups, self.cin, self.cout)),
            }],
            OpKind::Separable { k } => vec![
                ConvStage {
                    cout: self.cin,
                    cin: self.cin,
                    kh: k,
                    kw: 1,
                    params: ConvParams::same(k, 1, self.cin),
                },
                ConvStage {
                    cout: self.cout,
                    cin: self.cin,
                    kh: 1,
                    kw: k,
                    params: ConvParams::same(1, k, 1),
                },
            ],
        }
    }

    /// Full-precision MAC count for an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let (mut h, mut w) = (h, w);
        let mut total = 0.0;
        for s in self.stages() {
            let (oh, ow) = s.out_hw(h, w);
            total += s.macs(oh, ow);
            (h, w) = (oh, ow);
        }
        total
    }
}

/// Parameters of one candidate operation.
#[derive(Clone, Debug)]
pub struct ConvOp {
    desc: OpDescriptor,
    stages: Vec<ConvStage>,
    kernels: Vec<Param>,
    bias: Param,
}

impl ConvOp {
    pub fn new<R: Rng + ?Sized>(desc: OpDescriptor, name: &str, rng: &mut R) -> Self {
        let stages = desc.stages();
        let kernels = stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let shape = s.kernel_shape();
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (3.0 / fan_in).sqrt();
                Param::new(
                    format!("{name}.w{i}"),
                    ParamGroup::Weight,
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)),
                )
            })
            .collect();
        let bias = Param::new(format!("{name}.b"), ParamGroup::Weight, Tensor::zeros(&[desc.cout]));
        ConvOp {
            desc,
            stages,
            kernels,
            bias,
        }
    }

    pub fn desc(&self) -> &OpDescriptor {
        &self.desc
    }

    pub fn kernels(&self) -> &[Param] {
        &self.kernels
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = self.kernels.clone();
        v.push(self.bias.clone());
        v
    }

    /// Applies the op to `x` with the supplied (possibly quantized or noisy)
    /// kernels, one per stage.
    pub fn apply(&self, g: &mut Graph, x: Var, kernels: &[Var]) -> Result<Var> {
        OP_EVALS.with(|c| c.set(c.get() + 1));
        let bias = g.param(&self.bias);
        let last = self.stages.len() - 1;
        let mut h = x;
        for (i, (s, k)) in self.stages.iter().zip(kernels).enumerate() {
            h = g.conv2d(h, *k, (i == last).then_some(bias), s.params)?;
        }
        Ok(h)
    }

    /// Output shape for an input of shape `[n, cin, h, w]`.
    pub fn out_shape(&self, n: usize, h: usize, w: usize) -> Vec<usize> {
        let (mut h, mut w) = (h, w);
        for s in &self.stages {
            (h, w) = s.out_hw(h, w);
        }
        vec![n, self.desc.cout, h, w]
    }

    pub fn deep_clone(&self) -> ConvOp {
        ConvOp {
            desc: self.desc.clone(),
            stages: self.stages.clone(),
            kernels: self.kernels.iter().map(Param::deep_clone).collect(),
            bias: self.bias.deep_clone(),
        }
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn copy_from(&self, other: &ConvOp) {
        for (a, b) in self.params().iter().zip(other.params()) {
            a.set_value(b.value().clone());
        }
    }
}
