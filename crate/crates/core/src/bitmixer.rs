//! Blending of the per-bit-width variants of one candidate operation.
//!
//! For an op `o` with candidate bit widths `B` and non-negative weights
//! `α_b`, with `A = Σ α_b` and `α̂_b = α_b / A`:
//!
//! * independent: `Σ α_b · o(G(x,b), Q(W_b,b))`, one weight set per bit;
//! * shared: `A · o(Σ α̂_b G(x,b), Σ α̂_b Q(W,b))`, one weight set;
//! * san: `A · o(x + Σ α̂_b N_b(x), W + Σ α̂_b N_b(W))` where `N_b` is
//!   sampled quantization noise, so no quantizer sits in the graph.
//!
//! The leading `A` restores the signal magnitude when the op is one of
//! several in its layer and its bit weights sum to less than one.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvOp, OpDescriptor};
use crate::quant::{
    check_bits, levels, qnoise_sample, step_init_acts, step_init_weights, NoiseDist, QuantKind, QuantSpec,
};
use crate::tensor::{Graph, Param, Tensor, Var};

/// Bit width marking an unquantized layer.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Edges whose summed weight falls below this are treated as dead.
pub const DEAD_EDGE_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Independent,
    Shared,
    #[default]
    San,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Strategy::Independent),
            "shared" => Ok(Strategy::Shared),
            "san" => Ok(Strategy::San),
            _ => Err(Error::config(format!(
                "unknown strategy '{s}' (expected independent, shared or san)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Independent => "independent",
            Strategy::Shared => "shared",
            Strategy::San => "san",
        })
    }
}

/// How SAN noise is scaled before it is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SanScaling {
    /// Weight noise times the LSQ-equivalent range `step · Q_P` of the
    /// current weights; activation noise times `step · (2^b - 1)`.
    #[default]
    Range,
    /// Unit-range noise, `Δ/2 · z` as sampled.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Sample,
    /// Test hook: SAN adds no noise.
    Zero,
}

/// Per-forward state threaded through every edge.
pub struct MixContext<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub noise: NoiseMode,
    pub dist: NoiseDist,
    pub scaling: SanScaling,
}

#[derive(Debug)]
pub struct MixedEdge {
    strategy: Strategy,
    bits: Vec<u32>,
    /// One op per bit for `Independent`, a single shared op otherwise.
    ops: Vec<ConvOp>,
    /// `[bit][stage]` weight quantizers.
    weight_quant: Vec<Vec<QuantSpec>>,
    act_quant: Vec<QuantSpec>,
    /// Whether activation steps have been scaled to observed inputs.
    calibrated: Cell<bool>,
    dead: Cell<bool>,
}

fn is_quantized(bits: u32) -> bool {
    bits != FULL_PRECISION_BITS
}

impl MixedEdge {
    pub fn new(
        desc: OpDescriptor,
        bits: &[u32],
        strategy: Strategy,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::config(format!("edge {name}: empty bit list")));
        }
        for &b in bits {
            if is_quantized(b) {
                check_bits(b)?;
            }
        }
        let n_ops = if strategy == Strategy::Independent { bits.len() } else { 1 };
        let ops: Vec<ConvOp> = (0..n_ops)
            .map(|i| ConvOp::new(desc.clone(), &format!("{name}.op{i}"), rng))
            .collect();
        let mut weight_quant = Vec::with_capacity(bits.len());
        let mut act_quant = Vec::with_capacity(bits.len());
        for (bi, &b) in bits.iter().enumerate() {
            let op = &ops[bi.min(n_ops - 1)];
            let qb = if is_quantized(b) { b } else { 8 };
            let wq = op
                .kernels()
                .iter()
                .enumerate()
                .map(|(si, k)| {
                    QuantSpec::new(
                        format!("{name}.b{b}.wstep{si}"),
                        QuantKind::WeightLsq,
                        qb,
                        step_init_weights(&k.value(), qb),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            weight_quant.push(wq);
            act_quant.push(QuantSpec::new(
                format!("{name}.b{b}.astep"),
                QuantKind::ActHwgq,
                qb,
                step_init_acts(qb, 1.0),
            )?);
        }
        Ok(MixedEdge {
            strategy,
            bits: bits.to_vec(),
            ops,
            weight_quant,
            act_quant,
            calibrated: Cell::new(false),
            dead: Cell::new(false),
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn desc(&self) -> &OpDescriptor {
        self.ops[0].desc()
    }

    pub fn ops(&self) -> &[ConvOp] {
        &self.ops
    }

    /// Whether the last shared/SAN forward found `Σ α_b` below threshold.
    pub fn is_dead(&self) -> bool {
        self.dead.get()
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v: Vec<Param> = self.ops.iter().flat_map(|o| o.params()).collect();
        v.extend(self.step_params());
        v
    }

    /// Trainable quantizer steps, a subset of [`MixedEdge::params`].
    pub fn step_params(&self) -> Vec<Param> {
        let mut v = Vec::new();
        if self.strategy != Strategy::San {
            for (bi, &b) in self.bits.iter().enumerate() {
                if is_quantized(b) {
                    v.extend(self.weight_quant[bi].iter().map(|q| q.step_param().clone()));
                    v.push(self.act_quant[bi].step_param().clone());
                }
            }
        }
        v
    }

    pub fn weight_quant(&self, bit_index: usize) -> &[QuantSpec] {
        &self.weight_quant[bit_index]
    }

    pub fn act_quant(&self, bit_index: usize) -> &QuantSpec {
        &self.act_quant[bit_index]
    }

    fn op_for(&self, bit_index: usize) -> &ConvOp {
        &self.ops[bit_index.min(self.ops.len() - 1)]
    }

    /// Multiplies every kernel and weight step by `factor`.
    pub fn scale_weights(&self, factor: f64) {
        for op in &self.ops {
            for k in op.kernels() {
                let v = k.value().map(|w| w * factor);
                k.set_value(v);
            }
        }
        for q in self.weight_quant.iter().flatten() {
            q.set_step(q.step() * factor);
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated.get()
    }

    pub fn set_calibrated(&self, calibrated: bool) {
        self.calibrated.set(calibrated);
    }

    /// On the first input seen, rescales every activation step to the input's
    /// root mean square. Later calls do nothing.
    pub fn calibrate(&self, x: &Tensor) {
        if self.calibrated.replace(true) {
            return;
        }
        let rms = (x.data().iter().map(|v| v * v).sum::<f64>() / x.numel().max(1) as f64).sqrt();
        if !(rms > 0.0) || !rms.is_finite() {
            return;
        }
        for q in &self.act_quant {
            q.set_step(step_init_acts(q.bits(), rms));
        }
    }

    /// `G(x, b)`.
    pub fn quantize_input(&self, g: &mut Graph, x: Var, bit_index: usize) -> Result<Var> {
        if !is_quantized(self.bits[bit_index]) {
            return Ok(x);
        }
        self.act_quant[bit_index].apply(g, x)
    }

    /// `Q(W, b)` for every stage kernel of the op used at `bit_index`.
    pub fn quantize_kernels(&self, g: &mut Graph, bit_index: usize) -> Result<Vec<Var>> {
        let op = self.op_for(bit_index);
        op.kernels()
            .iter()
            .zip(&self.weight_quant[bit_index])
            .map(|(k, q)| {
                let kv = g.param(k);
                if is_quantized(self.bits[bit_index]) {
                    q.apply(g, kv)
                } else {
                    Ok(kv)
                }
            })
            .collect()
    }

    /// `o(G(x, b), Q(W_b, b))`, the plain quantized path at one bit width.
    pub fn single_bit_path(&self, g: &mut Graph, x: Var, bit_index: usize) -> Result<Var> {
        self.calibrate(g.value(x));
        let xq = self.quantize_input(g, x, bit_index)?;
        let ks = self.quantize_kernels(g, bit_index)?;
        self.op_for(bit_index).apply(g, xq, &ks)
    }

    /// Dispatches on the edge's strategy. `alphas` holds one scalar per bit.
    pub fn forward(&self, g: &mut Graph, x: Var, alphas: &[Var], ctx: &mut MixContext<'_>) -> Result<Var> {
        if alphas.len() != self.bits.len() {
            return Err(Error::shape(format!(
                "edge has {} bit widths but got {} weights",
                self.bits.len(),
                alphas.len()
            )));
        }
        self.calibrate(g.value(x));
        match self.strategy {
            Strategy::Independent => self.mix_independent(g, x, alphas),
            Strategy::Shared => self.mix_shared(g, x, alphas),
            Strategy::San => self.mix_san(g, x, alphas, ctx),
        }
    }

    pub fn mix_independent(&self, g: &mut Graph, x: Var, alphas: &[Var]) -> Result<Var> {
        if self.ops.len() != self.bits.len() {
            return Err(Error::config("independent mixing needs one weight set per bit width"));
        }
        let mut acc: Option<Var> = None;
        for (bi, &a) in alphas.iter().enumerate() {
            let y = self.single_bit_path(g, x, bi)?;
            let y = g.mul(y, a)?;
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        Ok(acc.expect("non-empty bit list"))
    }

    /// `(A, [α̂_b])`, or `None` when the edge is dead.
    fn normalized(&self, g: &mut Graph, alphas: &[Var]) -> Result<Option<(Var, Vec<Var>)>> {
        let mut total = alphas[0];
        for &a in &alphas[1..] {
            total = g.add(total, a)?;
        }
        if g.value(total).item() < DEAD_EDGE_THRESHOLD {
            self.dead.set(true);
            return Ok(None);
        }
        self.dead.set(false);
        let hats = alphas
            .iter()
            .map(|&a| g.div(a, total))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((total, hats)))
    }

    fn dead_output(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [n, _, h, w] = g.value(x).dims4()?;
        Ok(g.constant(Tensor::zeros(&self.ops[0].out_shape(n, h, w))))
    }

    fn weighted_sum(g: &mut Graph, terms: &[Var], weights: &[Var]) -> Result<Var> {
        let mut acc = g.mul(terms[0], weights[0])?;
        for (&t, &w) in terms.iter().zip(weights).skip(1) {
            let tw = g.mul(t, w)?;
            acc = g.add(acc, tw)?;
        }
        Ok(acc)
    }

    pub fn mix_shared(&self, g: &mut Graph, x: Var, alphas: &[Var]) -> Result<Var> {
        let Some((total, hats)) = self.normalized(g, alphas)? else {
            return self.dead_output(g, x);
        };
        let xs = (0..self.bits.len())
            .map(|bi| self.quantize_input(g, x, bi))
            .collect::<Result<Vec<_>>>()?;
        let x_mix = Self::weighted_sum(g, &xs, &hats)?;
        let per_bit: Vec<Vec<Var>> = (0..self.bits.len())
            .map(|bi| self.quantize_kernels(g, bi))
            .collect::<Result<_>>()?;
        let n_stages = per_bit[0].len();
        let mut kernels = Vec::with_capacity(n_stages);
        for si in 0..n_stages {
            let ks: Vec<Var> = per_bit.iter().map(|k| k[si]).collect();
            kernels.push(Self::weighted_sum(g, &ks, &hats)?);
        }
        let y = self.ops[0].apply(g, x_mix, &kernels)?;
        g.mul(y, total)
    }

    pub fn mix_san(&self, g: &mut Graph, x: Var, alphas: &[Var], ctx: &mut MixContext<'_>) -> Result<Var> {
        let Some((total, hats)) = self.normalized(g, alphas)? else {
            return self.dead_output(g, x);
        };
        let op = &self.ops[0];
        let kernels: Vec<Var> = op.kernels().iter().map(|k| g.param(k)).collect();
        if ctx.noise == NoiseMode::Zero {
            let y = op.apply(g, x, &kernels)?;
            return g.mul(y, total);
        }
        let x_shape = g.value(x).shape().to_vec();
        let mut x_noise = Vec::new();
        let mut w_noise: Vec<Vec<Var>> = vec![Vec::new(); kernels.len()];
        let mut live_hats = Vec::new();
        for (bi, &b) in self.bits.iter().enumerate() {
            if !is_quantized(b) {
                continue;
            }
            live_hats.push(hats[bi]);
            let a_scale = match ctx.scaling {
                SanScaling::Range => self.act_quant[bi].range(),
                SanScaling::Raw => 1.0,
            };
            let n = qnoise_sample(&x_shape, b, ctx.dist, ctx.rng).map(|v| v * a_scale);
            x_noise.push(g.constant(n));
            for (si, k) in op.kernels().iter().enumerate() {
                let w = k.value();
                let w_scale = match ctx.scaling {
                    SanScaling::Range => step_init_weights(&w, b) * levels(QuantKind::WeightLsq, b).1,
                    SanScaling::Raw => 1.0,
                };
                let n = qnoise_sample(w.shape(), b, ctx.dist, ctx.rng).map(|v| v * w_scale);
                drop(w);
                w_noise[si].push(g.constant(n));
            }
        }
        if live_hats.is_empty() {
            let y = op.apply(g, x, &kernels)?;
            return g.mul(y, total);
        }
        let xn = Self::weighted_sum(g, &x_noise, &live_hats)?;
        let x_noisy = g.add(x, xn)?;
        let mut noisy_kernels = Vec::with_capacity(kernels.len());
        for (k, noises) in kernels.iter().zip(&w_noise) {
            let wn = Self::weighted_sum(g, noises, &live_hats)?;
            noisy_kernels.push(g.add(*k, wn)?);
        }
        let y = op.apply(g, x_noisy, &noisy_kernels)?;
        g.mul(y, total)
    }

    /// A single-bit shared edge holding copies of the weights and quantizer
    /// steps used at `bit_index`.
    pub fn extract(&self, bit_index: usize) -> MixedEdge {
        MixedEdge {
            strategy: Strategy::Shared,
            bits: vec![self.bits[bit_index]],
            ops: vec![self.op_for(bit_index).deep_clone()],
            weight_quant: vec![self.weight_quant[bit_index].iter().map(QuantSpec::deep_clone).collect()],
            act_quant: vec![self.act_quant[bit_index].deep_clone()],
            calibrated: Cell::new(self.calibrated.get()),
            dead: Cell::new(false),
        }
    }

    /// A copy with fresh parameter handles holding the same values.
    pub fn deep_clone(&self) -> MixedEdge {
        MixedEdge {
            strategy: self.strategy,
            bits: self.bits.clone(),
            ops: self.ops.iter().map(ConvOp::deep_clone).collect(),
            weight_quant: self
                .weight_quant
                .iter()
                .map(|v| v.iter().map(QuantSpec::deep_clone).collect())
                .collect(),
            act_quant: self.act_quant.iter().map(QuantSpec::deep_clone).collect(),
            calibrated: Cell::new(self.calibrated.get()),
            dead: Cell::new(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{op_eval_count, reset_op_eval_count};
    use rand::{Rng, SeedableRng};

    fn edge(strategy: Strategy, bits: &[u32]) -> MixedEdge {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let desc = OpDescriptor::parse("simple 3x3", 3, 4).unwrap();
        MixedEdge::new(desc, bits, strategy, "e", &mut rng).unwrap()
    }

    fn input() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-1.0..2.0))
    }

    fn run(e: &MixedEdge, alphas: &[f64], noise: NoiseMode) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = MixContext {
            rng: &mut rng,
            noise,
            dist: NoiseDist::Gaussian,
            scaling: SanScaling::Range,
        };
        let mut g = Graph::new();
        let x = g.constant(input());
        let a: Vec<Var> = alphas.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let y = e.forward(&mut g, x, &a, &mut ctx).unwrap();
        g.value(y).clone()
    }

    fn single(e: &MixedEdge, bi: usize) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(input());
        let y = e.single_bit_path(&mut g, x, bi).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn one_hot_collapse_all_strategies() {
        for s in [Strategy::Independent, Strategy::Shared] {
            let e = edge(s, &[4, 8]);
            assert_eq!(run(&e, &[0.0, 1.0], NoiseMode::Sample), single(&e, 1), "{s}");
            assert_eq!(run(&e, &[1.0, 0.0], NoiseMode::Sample), single(&e, 0), "{s}");
        }
        let e = edge(Strategy::San, &[4, 8]);
        let mut g = Graph::new();
        let x = g.constant(input());
        let ks: Vec<Var> = e.ops()[0].kernels().iter().map(|k| g.param(k)).collect();
        let y = e.ops()[0].apply(&mut g, x, &ks).unwrap();
        assert_eq!(&run(&e, &[0.0, 1.0], NoiseMode::Zero), g.value(y));
    }

    #[test]
    fn shared_with_mixed_alphas_matches_hand_composition() {
        let e = edge(Strategy::Shared, &[4, 8]);
        let out = run(&e, &[0.3, 0.2], NoiseMode::Sample);
        let mut g = Graph::new();
        let x = g.constant(input());
        let (x4, x8) = (e.quantize_input(&mut g, x, 0).unwrap(), e.quantize_input(&mut g, x, 1).unwrap());
        let (k4, k8) = (e.quantize_kernels(&mut g, 0).unwrap()[0], e.quantize_kernels(&mut g, 1).unwrap()[0]);
        let blend = |g: &mut Graph, a: Var, b: Var| {
            let a = g.scalar_mul(a, 0.6).unwrap();
            let b = g.scalar_mul(b, 0.4).unwrap();
            g.add(a, b).unwrap()
        };
        let xm = blend(&mut g, x4, x8);
        let km = blend(&mut g, k4, k8);
        let y = e.ops()[0].apply(&mut g, xm, &[km]).unwrap();
        let y = g.scalar_mul(y, 0.5).unwrap();
        assert!(out.max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn independent_half_half_is_mean_of_paths() {
        let e = edge(Strategy::Independent, &[4, 8]);
        e.ops()[1].copy_from(&e.ops()[0]);
        let out = run(&e, &[0.5, 0.5], NoiseMode::Sample);
        let (a, b) = (single(&e, 0), single(&e, 1));
        let mean = Tensor::from_fn(a.shape(), |i| 0.5 * (a.data()[i] + b.data()[i]));
        assert!(out.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn op_evaluations_per_forward() {
        for (s, expect) in [(Strategy::Independent, 3), (Strategy::Shared, 1), (Strategy::San, 1)] {
            let e = edge(s, &[2, 4, 8]);
            reset_op_eval_count();
            run(&e, &[0.2, 0.3, 0.1], NoiseMode::Sample);
            assert_eq!(op_eval_count(), expect, "{s}");
        }
    }

    #[test]
    fn strategies_agree_for_single_bit_without_noise() {
        let shared = edge(Strategy::Shared, &[8]);
        let indep = edge(Strategy::Independent, &[8]);
        assert_eq!(run(&shared, &[0.7], NoiseMode::Zero), run(&indep, &[0.7], NoiseMode::Zero));
        // with quantization switched off all three paths are the same float op
        let fp = [FULL_PRECISION_BITS];
        let outs: Vec<Tensor> = [Strategy::Independent, Strategy::Shared, Strategy::San]
            .into_iter()
            .map(|s| run(&edge(s, &fp), &[0.7], NoiseMode::Zero))
            .collect();
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
        assert!(outs[0].max_abs_diff(&outs[2]) < 1e-12);
        assert!(outs[2].max_abs_diff(&run(&edge(Strategy::San, &[8]), &[0.7], NoiseMode::Zero)) < 1e-12);
    }

    #[test]
    fn dead_edge_outputs_zero() {
        let e = edge(Strategy::Shared, &[4, 8]);
        let out = run(&e, &[0.0, 1e-9], NoiseMode::Sample);
        assert!(e.is_dead());
        assert_eq!(out.shape(), &[2, 4, 5, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        run(&e, &[0.1, 0.1], NoiseMode::Sample);
        assert!(!e.is_dead());
    }

    #[test]
    fn independent_needs_per_bit_weights() {
        let e = edge(Strategy::Shared, &[4, 8]);
        let mut g = Graph::new();
        let x = g.constant(input());
        let a = [g.constant(Tensor::scalar(0.5)), g.constant(Tensor::scalar(0.5))];
        assert!(matches!(e.mix_independent(&mut g, x, &a), Err(Error::Config(_))));
    }
}
