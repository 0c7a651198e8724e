//! The searchable super-resolution network.
//!
//! Layout for body repeat count `K`, channel width `C` and scale `r`:
//!
//! * head: two layers `3 → C → C`, each followed by ReLU;
//! * body (× K): `l1 → ReLU → l2` in sequence plus a parallel `skip` layer,
//!   summed and wrapped by an ADQ block with the block input as residual;
//! * upsample: one layer `C → C·r²`, pixel shuffle, ReLU;
//! * tail: `t1 = T1(u)` (`C → 3`) and `T1(u) + T2(t1)` (`3 → 3`);
//! * a bicubic upscaled copy of the input is added to the output.
//!
//! Tail kernels start scaled down so the initial output is close to the
//! bicubic image.
//!
//! Every searchable layer holds one [`MixedEdge`] per candidate op and a
//! softmax-parameterized weight vector over the flat `(op, bit)` grid.

mod adq;
mod checkpoint;
mod genotype;

use std::cell::RefCell;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adq::{AdqBlock, BatchNorm2d, BnMode};
pub use checkpoint::{Checkpoint, NormState, TensorState};
pub use genotype::{discretize, Genotype, LayerChoice, SPACE_VERSION};

use crate::bitmixer::{MixContext, MixedEdge, NoiseMode, SanScaling, Strategy, FULL_PRECISION_BITS};
use crate::data::bicubic_upscale;
use crate::error::{Error, Result};
use crate::ops::OpDescriptor;
use crate::quant::{check_bits, NoiseDist};
use crate::tensor::{Graph, Param, ParamGroup, Tensor, Var};

const IMAGE_CHANNELS: usize = 3;

/// Initial scale of tail kernels relative to the other layers.
pub const TAIL_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Head,
    Body,
    Upsample,
    Tail,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Head => "head",
            Block::Body => "body",
            Block::Upsample => "upsample",
            Block::Tail => "tail",
        })
    }
}

/// Position of a searchable layer. Body layers are numbered `3k`, `3k+1`
/// (sequential pair) and `3k+2` (skip) for repeat `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerId {
    pub block: Block,
    pub index: usize,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.index)
    }
}

/// Width and depth of the network skeleton, independent of the catalogs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skeleton {
    pub channels: usize,
    pub body_repeats: usize,
    pub scale: usize,
}

impl Skeleton {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("space.channels must be positive"));
        }
        if self.scale == 0 {
            return Err(Error::config("space.scale must be positive"));
        }
        Ok(())
    }

    /// Searchable layers in forward order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids = vec![LayerId { block: Block::Head, index: 0 }, LayerId { block: Block::Head, index: 1 }];
        ids.extend((0..3 * self.body_repeats).map(|index| LayerId { block: Block::Body, index }));
        ids.push(LayerId { block: Block::Upsample, index: 0 });
        ids.push(LayerId { block: Block::Tail, index: 0 });
        ids.push(LayerId { block: Block::Tail, index: 1 });
        ids
    }

    /// `(cin, cout, runs_at_high_resolution)` of a layer.
    pub fn layer_io(&self, id: LayerId) -> (usize, usize, bool) {
        let c = self.channels;
        match (id.block, id.index) {
            (Block::Head, 0) => (IMAGE_CHANNELS, c, false),
            (Block::Head, _) | (Block::Body, _) => (c, c, false),
            (Block::Upsample, _) => (c, c * self.scale * self.scale, false),
            (Block::Tail, 0) => (c, IMAGE_CHANNELS, true),
            (Block::Tail, _) => (IMAGE_CHANNELS, IMAGE_CHANNELS, true),
        }
    }
}

/// Candidate catalogs and bit widths of the search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpaceSpec {
    pub channels: usize,
    /// Body repeat count `K`.
    #[serde(rename = "K", alias = "body_repeats")]
    pub body_repeats: usize,
    pub scale: usize,
    pub bits: Vec<u32>,
    pub head: Vec<String>,
    pub body: Vec<String>,
    pub skip: Vec<String>,
    pub upsample: Vec<String>,
    pub tail: Vec<String>,
    /// Layers (`"head.0"`, `"tail.1"`, ...) kept at full precision.
    pub full_precision_layers: Vec<String>,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        let body = names(&["conv 5x1 1x5", "conv 3x1 1x3", "simple 3x3", "simple 5x5"]);
        SearchSpaceSpec {
            channels: 8,
            body_repeats: 1,
            scale: 2,
            bits: vec![4, 8],
            head: names(&["simple 3x3", "simple 5x5", "simple 3x3 grouped 3", "simple 5x5 grouped 3"]),
            body: body.clone(),
            skip: names(&["simple 1x1", "simple 3x3", "simple 5x5"]),
            upsample: body,
            tail: names(&["simple 1x1", "simple 3x3", "simple 5x5"]),
            full_precision_layers: Vec::new(),
        }
    }
}

impl SearchSpaceSpec {
    /// The full-size setting: 36 channels, three body repeats, scale 4.
    pub fn full() -> Self {
        SearchSpaceSpec {
            channels: 36,
            body_repeats: 3,
            scale: 4,
            ..Self::default()
        }
    }

    /// One op per catalog and one bit width: the space holds a single network.
    pub fn degenerate() -> Self {
        let one = names(&["simple 3x3"]);
        SearchSpaceSpec {
            bits: vec![8],
            head: one.clone(),
            body: one.clone(),
            skip: names(&["simple 1x1"]),
            upsample: one.clone(),
            tail: one,
            ..Self::default()
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            channels: self.channels,
            body_repeats: self.body_repeats,
            scale: self.scale,
        }
    }

    pub fn catalog(&self, id: LayerId) -> &[String] {
        match id.block {
            Block::Head => &self.head,
            Block::Body if id.index % 3 == 2 => &self.skip,
            Block::Body => &self.body,
            Block::Upsample => &self.upsample,
            Block::Tail => &self.tail,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton().validate()?;
        if self.bits.is_empty() {
            return Err(Error::config("space.bits must not be empty"));
        }
        for &b in &self.bits {
            check_bits(b).map_err(|e| Error::config(format!("space.bits: {e}")))?;
        }
        for (key, cat) in [
            ("head", &self.head),
            ("body", &self.body),
            ("skip", &self.skip),
            ("upsample", &self.upsample),
            ("tail", &self.tail),
        ] {
            if cat.is_empty() {
                return Err(Error::config(format!("space.{key} needs at least one operation")));
            }
            for name in cat {
                crate::ops::OpKind::parse(name).map_err(|e| Error::config(format!("space.{key}: {e}")))?;
            }
        }
        let ids: Vec<String> = self.skeleton().layer_ids().iter().map(|i| i.to_string()).collect();
        for l in &self.full_precision_layers {
            if !ids.contains(l) {
                return Err(Error::config(format!("space.full_precision_layers: unknown layer '{l}'")));
            }
        }
        Ok(())
    }

    /// One plan per searchable layer, in forward order.
    pub fn plans(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let sk = self.skeleton();
        Ok(sk
            .layer_ids()
            .into_iter()
            .map(|id| {
                let bits = if self.full_precision_layers.contains(&id.to_string()) {
                    vec![FULL_PRECISION_BITS]
                } else {
                    self.bits.clone()
                };
                LayerPlan {
                    id,
                    ops: self.catalog(id).to_vec(),
                    bits,
                }
            })
            .collect())
    }
}

/// Candidate ops and bit widths of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub id: LayerId,
    pub ops: Vec<String>,
    pub bits: Vec<u32>,
}

/// One searchable layer: `Σ_i Σ_b BitMixer(α_ib, o_i, x)`.
#[derive(Debug)]
pub struct SearchLayer {
    id: LayerId,
    hr: bool,
    bits: Vec<u32>,
    edges: Vec<MixedEdge>,
    logits: Param,
    fixed: RefCell<Option<Vec<f64>>>,
}

impl SearchLayer {
    fn build(plan: &LayerPlan, sk: &Skeleton, strategy: Strategy, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (cin, cout, hr) = sk.layer_io(plan.id);
        let edges = plan
            .ops
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let desc = OpDescriptor::parse(name, cin, cout)?;
                MixedEdge::new(desc, &plan.bits, strategy, &format!("{}.e{i}", plan.id), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = plan.ops.len() * plan.bits.len();
        Ok(SearchLayer {
            id: plan.id,
            hr,
            bits: plan.bits.clone(),
            edges,
            logits: Param::new(format!("{}.alpha", plan.id), ParamGroup::Arch, Tensor::zeros(&[n])),
            fixed: RefCell::new(None),
        })
    }

    pub fn id(&self) -> LayerId {
        self.id
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn edges(&self) -> &[MixedEdge] {
        &self.edges
    }

    pub fn op_names(&self) -> Vec<String> {
        self.edges.iter().map(|e| e.desc().name()).collect()
    }

    pub fn logits(&self) -> &Param {
        &self.logits
    }

    /// Size of the flat `(op, bit)` grid; entry `i·|B| + b`.
    pub fn n_alphas(&self) -> usize {
        self.edges.len() * self.bits.len()
    }

    /// Replaces the softmax weights by fixed values (tests, instantiated
    /// networks); `None` restores the softmax.
    pub fn set_fixed_alpha(&self, alpha: Option<Vec<f64>>) -> Result<()> {
        if let Some(a) = &alpha {
            if a.len() != self.n_alphas() || a.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::shape(format!(
                    "layer {}: fixed alpha needs {} non-negative entries",
                    self.id,
                    self.n_alphas()
                )));
            }
        }
        *self.fixed.borrow_mut() = alpha;
        Ok(())
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        if let Some(a) = &*self.fixed.borrow() {
            return a.clone();
        }
        let l = self.logits.value();
        let m = l.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.data().iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// The weight vector recorded on `g`.
    pub fn alphas(&self, g: &mut Graph) -> Result<Var> {
        if let Some(a) = &*self.fixed.borrow() {
            return Ok(g.constant(Tensor::from_vec(a.clone())));
        }
        let l = g.param(&self.logits);
        g.softmax(l)
    }

    /// Spatial size of the layer input for a low-resolution input `h x w`.
    pub fn input_hw(&self, h: usize, w: usize, scale: usize) -> (usize, usize) {
        if self.hr {
            (h * scale, w * scale)
        } else {
            (h, w)
        }
    }

    /// MAC count of each candidate op.
    pub fn op_flops(&self, h: usize, w: usize, scale: usize) -> Vec<f64> {
        let (h, w) = self.input_hw(h, w, scale);
        self.edges.iter().map(|e| e.desc().flops(h, w)).collect()
    }

    /// `b² · F(o_i)` over the flat `(op, bit)` grid.
    pub fn edge_bitops(&self, h: usize, w: usize, scale: usize) -> Vec<f64> {
        let flops = self.op_flops(h, w, scale);
        flops
            .iter()
            .flat_map(|f| self.bits.iter().map(move |&b| (b * b) as f64 * f))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut MixContext<'_>) -> Result<Var> {
        let a = self.alphas(g)?;
        let nb = self.bits.len();
        let mut acc: Option<Var> = None;
        let mut zeros: Option<Var> = None;
        for (i, e) in self.edges.iter().enumerate() {
            let ai = (0..nb)
                .map(|b| g.select(a, i * nb + b))
                .collect::<Result<Vec<_>>>()?;
            let y = e.forward(g, x, &ai, ctx)?;
            if e.is_dead() {
                zeros.get_or_insert(y);
                continue;
            }
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        Ok(acc.or(zeros).expect("layer has at least one edge"))
    }

    fn with_edges(&self, edges: Vec<MixedEdge>, bits: Vec<u32>, fixed: Option<Vec<f64>>) -> SearchLayer {
        let n = edges.len() * bits.len();
        SearchLayer {
            id: self.id,
            hr: self.hr,
            bits,
            edges,
            logits: Param::new(format!("{}.alpha", self.id), ParamGroup::Arch, Tensor::zeros(&[n])),
            fixed: RefCell::new(fixed),
        }
    }
}

/// A searchable network, or a fixed one when every layer has one edge.
#[derive(Debug)]
pub struct Supernet {
    skeleton: Skeleton,
    strategy: Strategy,
    layers: Vec<SearchLayer>,
    adq: Vec<AdqBlock>,
}

/// A discretized, single-path network.
pub type Network = Supernet;

/// Per-forward settings.
pub struct ForwardOpts {
    pub noise: NoiseMode,
    pub dist: NoiseDist,
    pub scaling: SanScaling,
    pub bn: BnMode,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts {
            noise: NoiseMode::Zero,
            dist: NoiseDist::Gaussian,
            scaling: SanScaling::Range,
            bn: BnMode::Eval,
        }
    }

    pub fn train(dist: NoiseDist, scaling: SanScaling, update_stats: bool) -> Self {
        ForwardOpts {
            noise: NoiseMode::Sample,
            dist,
            scaling,
            bn: BnMode::Train { update_stats },
        }
    }
}

impl Supernet {
    pub fn build(spec: &SearchSpaceSpec, strategy: Strategy, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::from_plans(spec.skeleton(), &spec.plans()?, strategy, rng)
    }

    pub fn from_plans(skeleton: Skeleton, plans: &[LayerPlan], strategy: Strategy, rng: &mut ChaCha8Rng) -> Result<Self> {
        skeleton.validate()?;
        let ids = skeleton.layer_ids();
        if plans.len() != ids.len() || plans.iter().zip(&ids).any(|(p, id)| p.id != *id) {
            return Err(Error::config(format!(
                "layer plan does not match the skeleton ({} layers expected)",
                ids.len()
            )));
        }
        let layers = plans
            .iter()
            .map(|p| SearchLayer::build(p, &skeleton, strategy, rng))
            .collect::<Result<Vec<_>>>()?;
        for l in layers.iter().filter(|l| l.id.block == Block::Tail) {
            for e in &l.edges {
                e.scale_weights(TAIL_INIT_GAIN);
            }
        }
        let adq = (0..skeleton.body_repeats)
            .map(|k| AdqBlock::new(&format!("body{k}.adq"), skeleton.channels, true))
            .collect();
        Ok(Supernet {
            skeleton,
            strategy,
            layers,
            adq,
        })
    }

    pub fn skeleton(&self) -> Skeleton {
        self.skeleton
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn layers(&self) -> &[SearchLayer] {
        &self.layers
    }

    pub fn adq_blocks(&self) -> &[AdqBlock] {
        &self.adq
    }

    pub fn layer(&self, id: LayerId) -> Option<&SearchLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn weight_params(&self) -> Vec<Param> {
        let mut v: Vec<Param> = self.layers.iter().flat_map(|l| l.edges.iter().flat_map(|e| e.params())).collect();
        v.extend(self.adq.iter().flat_map(|a| a.params()));
        v
    }

    /// Quantizer steps among [`Supernet::weight_params`].
    pub fn step_params(&self) -> Vec<Param> {
        self.layers.iter().flat_map(|l| l.edges.iter().flat_map(|e| e.step_params())).collect()
    }

    pub fn arch_params(&self) -> Vec<Param> {
        self.layers
            .iter()
            .filter(|l| l.fixed.borrow().is_none())
            .map(|l| l.logits.clone())
            .collect()
    }

    /// Puts every layer's weight on one `(op, bit)` entry; `choice[l]` is the
    /// flat index for layer `l`.
    pub fn set_one_hot(&self, choice: &[usize]) -> Result<()> {
        if choice.len() != self.layers.len() {
            return Err(Error::shape("one entry per layer required"));
        }
        for (l, &c) in self.layers.iter().zip(choice) {
            let mut a = vec![0.0; l.n_alphas()];
            *a.get_mut(c).ok_or_else(|| Error::shape(format!("layer {}: index {c} out of range", l.id)))? = 1.0;
            l.set_fixed_alpha(Some(a))?;
        }
        Ok(())
    }

    pub fn clear_fixed_alphas(&self) {
        for l in &self.layers {
            *l.fixed.borrow_mut() = None;
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, opts: &ForwardOpts, rng: &mut ChaCha8Rng) -> Result<Var> {
        let [_, c, _, _] = g.value(x).dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(format!("expected {IMAGE_CHANNELS} input channels, got {c}")));
        }
        let mut ctx = MixContext {
            rng,
            noise: opts.noise,
            dist: opts.dist,
            scaling: opts.scaling,
        };
        let r = self.skeleton.scale;
        let anchor = bicubic_upscale(g.value(x), r)?;
        let mut layers = self.layers.iter();
        let mut next = || layers.next().expect("layer count matches skeleton");

        let mut h = x;
        for _ in 0..2 {
            h = next().forward(g, h, &mut ctx)?;
            h = g.relu(h)?;
        }
        for adq in &self.adq {
            let (l1, l2, skip) = (next(), next(), next());
            h = adq.forward(g, h, opts.bn, |g, xin| {
                let s = l1.forward(g, xin, &mut ctx)?;
                let s = g.relu(s)?;
                let s = l2.forward(g, s, &mut ctx)?;
                let p = skip.forward(g, xin, &mut ctx)?;
                g.add(s, p)
            })?;
        }
        let u = next().forward(g, h, &mut ctx)?;
        let u = g.pixel_shuffle(u, r)?;
        let u = g.relu(u)?;
        let t1 = next().forward(g, u, &mut ctx)?;
        let t2 = next().forward(g, t1, &mut ctx)?;
        let out = g.add(t1, t2)?;
        let anchor = g.constant(anchor);
        g.add(out, anchor)
    }

    /// Inference with running normalization statistics and no noise.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::for_group(ParamGroup::Arch);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, &ForwardOpts::eval(), &mut rng)?;
        Ok(g.value(y).clone())
    }

    /// A fixed network with the chosen edges' current weights and the same
    /// normalization state.
    pub fn extract(&self, genotype: &Genotype) -> Result<Network> {
        genotype.check_skeleton(&self.skeleton)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, choice) in self.layers.iter().zip(&genotype.layers) {
            let (oi, bi) = l.locate(&choice.op, choice.bits)?;
            let edge = l.edges[oi].extract(bi);
            layers.push(l.with_edges(vec![edge], vec![choice.bits], Some(vec![1.0])));
        }
        Ok(Supernet {
            skeleton: self.skeleton,
            strategy: Strategy::Shared,
            layers,
            adq: self.adq.iter().map(AdqBlock::deep_clone).collect(),
        })
    }
}

impl SearchLayer {
    /// `(op index, bit index)` of a named choice.
    pub fn locate(&self, op: &str, bits: u32) -> Result<(usize, usize)> {
        let oi = self
            .edges
            .iter()
            .position(|e| e.desc().name() == op)
            .ok_or_else(|| Error::config(format!("layer {}: op '{op}' is not a candidate", self.id)))?;
        let bi = self
            .bits
            .iter()
            .position(|&b| b == bits)
            .ok_or_else(|| Error::config(format!("layer {}: {bits} bits is not a candidate", self.id)))?;
        Ok((oi, bi))
    }
}

/// A freshly initialized fixed network for `genotype`, fake-quantized at the
/// chosen bit widths.
pub fn instantiate(genotype: &Genotype, rng: &mut ChaCha8Rng) -> Result<Network> {
    let plans = genotype.plans()?;
    let net = Supernet::from_plans(genotype.skeleton(), &plans, Strategy::Shared, rng)?;
    for l in &net.layers {
        l.set_fixed_alpha(Some(vec![1.0]))?;
    }
    Ok(net)
}
