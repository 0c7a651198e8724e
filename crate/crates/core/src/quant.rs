//! Fake quantizers and quantization noise.
//!
//! Weights use learned-step quantization with symmetric signed levels
//! `[-2^(b-1), 2^(b-1) - 1]`. Activations use a half-wave uniform quantizer
//! with unsigned levels `[0, 2^b - 1]` whose initial step is MSE-optimal for
//! a standard normal pre-activation. Both steps are trainable and receive
//! the LSQ gradient scaled by `1 / sqrt(numel * Q_P)`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, ParamGroup, Tensor, Var};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;
const STEP_FLOOR: f64 = 1e-8;
const ZERO_WEIGHT_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantKind {
    WeightLsq,
    ActHwgq,
}

/// Integer level bounds `(lo, hi)` of a quantizer.
pub fn levels(kind: QuantKind, bits: u32) -> (f64, f64) {
    match kind {
        QuantKind::WeightLsq => (-(2f64.powi(bits as i32 - 1)), 2f64.powi(bits as i32 - 1) - 1.0),
        QuantKind::ActHwgq => (0.0, 2f64.powi(bits as i32) - 1.0),
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "bit width {bits} outside supported range {MIN_BITS}..={MAX_BITS}"
        )))
    }
}

/// Bit width, kind and trainable step of one quantizer.
#[derive(Clone, Debug)]
pub struct QuantSpec {
    bits: u32,
    kind: QuantKind,
    step: Param,
}

impl QuantSpec {
    pub fn new(name: impl Into<String>, kind: QuantKind, bits: u32, step: f64) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantSpec {
            bits,
            kind,
            step: Param::new(name, ParamGroup::Weight, Tensor::scalar(step.max(STEP_FLOOR))),
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    pub fn step_param(&self) -> &Param {
        &self.step
    }

    pub fn step(&self) -> f64 {
        self.step.value().item()
    }

    pub fn set_step(&self, s: f64) {
        self.step.set_value(Tensor::scalar(s));
    }

    pub fn levels(&self) -> (f64, f64) {
        levels(self.kind, self.bits)
    }

    /// Largest positive level count, `Q_P`.
    pub fn q_p(&self) -> f64 {
        self.levels().1
    }

    /// Full representable magnitude `step * Q_P`.
    pub fn range(&self) -> f64 {
        self.step() * self.q_p()
    }

    fn clamp_step(&self) {
        let s = self.step();
        if !(s >= STEP_FLOOR) {
            log::warn!(
                "quantizer {} had non-positive step {s}; clamped to {STEP_FLOOR}",
                self.step.name()
            );
            self.set_step(STEP_FLOOR);
        }
    }

    /// Records `Q(x)` on the graph with the straight-through estimator.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.clamp_step();
        let (lo, hi) = self.levels();
        let n = g.value(x).numel() as f64;
        let s = g.param(&self.step);
        g.fake_quant(x, s, lo, hi, 1.0 / (n * hi).sqrt())
    }

    pub fn deep_clone(&self) -> QuantSpec {
        QuantSpec {
            bits: self.bits,
            kind: self.kind,
            step: self.step.deep_clone(),
        }
    }
}

pub fn lsq_quantize_weights(g: &mut Graph, w: Var, spec: &QuantSpec) -> Result<Var> {
    if spec.kind != QuantKind::WeightLsq {
        return Err(Error::config("lsq_quantize_weights needs a weight-lsq spec"));
    }
    spec.apply(g, w)
}

pub fn hwgq_quantize_acts(g: &mut Graph, x: Var, spec: &QuantSpec) -> Result<Var> {
    if spec.kind != QuantKind::ActHwgq {
        return Err(Error::config("hwgq_quantize_acts needs an act-hwgq spec"));
    }
    spec.apply(g, x)
}

/// LSQ initial step `2 * mean(|W|) / sqrt(Q_P)`.
pub fn step_init_weights(w: &Tensor, bits: u32) -> f64 {
    let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.numel() as f64;
    if mean_abs == 0.0 {
        return ZERO_WEIGHT_STEP;
    }
    let (_, qp) = levels(QuantKind::WeightLsq, bits);
    2.0 * mean_abs / qp.sqrt()
}

/// Half-wave initial step for pre-activations with standard deviation `std`.
pub fn step_init_acts(bits: u32, std: f64) -> f64 {
    hwgq_unit_step(bits) * std
}

/// MSE-optimal uniform half-wave step for `N(0, 1)` inputs, computed once
/// per bit width.
pub fn hwgq_unit_step(bits: u32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..=MAX_BITS)
            .map(|b| {
                if b < 1 {
                    return f64::NAN;
                }
                optimal_halfwave_step(2f64.powi(b as i32) - 1.0)
            })
            .collect()
    });
    table[bits as usize]
}

fn phi(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[(x - q)^2 ; a < x <= c]` for `x ~ N(0,1)`.
fn interval_error(a: f64, c: f64, q: f64) -> f64 {
    let p = cdf(c) - cdf(a);
    let m1 = phi(a) - phi(c);
    let xa = if a.is_infinite() { 0.0 } else { a * phi(a) };
    let xc = if c.is_infinite() { 0.0 } else { c * phi(c) };
    let m2 = p + xa - xc;
    m2 - 2.0 * q * m1 + q * q * p
}

/// Closed-form MSE between `relu(x)` and its `levels`-step uniform
/// quantization with step `s`, for `x ~ N(0,1)`.
pub fn halfwave_uniform_mse(s: f64, levels: f64) -> f64 {
    let top = levels as usize;
    let mut mse = interval_error(0.0, 0.5 * s, 0.0);
    for k in 1..top {
        let k = k as f64;
        mse += interval_error((k - 0.5) * s, (k + 0.5) * s, k * s);
    }
    mse + interval_error((levels - 0.5) * s, f64::INFINITY, levels * s)
}

fn optimal_halfwave_step(levels: f64) -> f64 {
    // golden section in log-step
    let f = |t: f64| halfwave_uniform_mse(t.exp(), levels);
    let (mut a, mut b) = ((1e-4f64).ln(), (4.0f64).ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (0.5 * (a + b)).exp()
}

/// Quantization noise scale `Δ = 1 / (2^b - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseDelta(f64);

impl NoiseDelta {
    pub fn for_bits(bits: u32) -> Self {
        NoiseDelta(1.0 / (2f64.powi(bits as i32) - 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    /// `Δ/2 · z` with `z ~ N(0, 1)`.
    #[default]
    Gaussian,
    /// Uniform on `[-Δ/2, Δ/2]`.
    Uniform,
}

/// Fresh quantization-noise tensor for bit width `bits`.
pub fn qnoise_sample<R: Rng + ?Sized>(shape: &[usize], bits: u32, dist: NoiseDist, rng: &mut R) -> Tensor {
    let half = NoiseDelta::for_bits(bits).value() / 2.0;
    match dist {
        NoiseDist::Gaussian => Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            half * z
        }),
        NoiseDist::Uniform => Tensor::from_fn(shape, |_| rng.random_range(-half..half)),
    }
}
