use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom, ConvParams};
use super::{pixel_shuffle, pixel_unshuffle, Param, ParamGroup, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction layout for the standard-deviation op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StdLayout {
    /// One value per `(n, c)` plane, output `[N, C, 1, 1]`.
    PerChannel,
    /// One value per sample over `C, H, W`, output `[N, 1, 1, 1]`.
    PerSample,
}

const STD_FLOOR: f64 = 1e-8;

/// How the second operand of a binary op maps onto the first.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// `map[i]` is the index into `b` for element `i` of `a`.
    Map(Rc<Vec<usize>>),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        let b_numel: usize = b.iter().product();
        if b_numel == 1 {
            return Ok(Bcast::Scalar);
        }
        // A rank-1 [C] operand broadcasts over NCHW channels.
        let b_full: Vec<usize> = if b.len() == 1 && a.len() == 4 {
            vec![1, b[0], 1, 1]
        } else {
            b.to_vec()
        };
        if b_full.len() != a.len() || b_full.iter().zip(a).any(|(&bd, &ad)| bd != ad && bd != 1) {
            return Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for d in (0..a.len()).rev() {
            strides[d] = if b_full[d] == 1 { 0 } else { s };
            s *= b_full[d];
        }
        let n: usize = a.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Bcast::Map(Rc::new(map)))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    PixelShuffle {
        input: usize,
        r: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    ScalarMul {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Abs {
        a: usize,
    },
    Square {
        a: usize,
    },
    Log {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    Select {
        a: usize,
        index: usize,
    },
    Std {
        a: usize,
    },
    FakeQuant {
        x: usize,
        step: usize,
        lo: f64,
        hi: f64,
        grad_scale: f64,
    },
    BatchNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<Param>,
}

/// Gradients of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

/// Tape of one forward pass.
///
/// Nodes are appended in execution order, so the index order is a
/// topological order and backward is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Option<ParamGroup>,
    last_visits: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that differentiates every parameter it sees.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            trainable: None,
            last_visits: 0,
        }
    }

    /// A graph that only differentiates parameters of `group`; all other
    /// parameters enter as constants.
    pub fn for_group(group: ParamGroup) -> Self {
        Graph {
            trainable: Some(group),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes processed by the most recent backward call.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward value of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported through [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter's current value. Its gradient is accumulated into
    /// the parameter on backward, unless the graph trains another group.
    pub fn param(&mut self, p: &Param) -> Var {
        let live = self.trainable.is_none_or(|g| g == p.group());
        self.nodes.push(Node {
            value: p.value().clone(),
            op: Op::Leaf,
            requires_grad: live,
            param: live.then(|| p.clone()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).dims4()?, self.value(kernel).shape(), p)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.cout {
                return Err(Error::shape(format!(
                    "conv2d: bias has {} values for {} output channels",
                    self.value(b).numel(),
                    geom.cout
                )));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut ids = vec![input.0, kernel.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        )
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(input), r)?;
        let rg = self.rg(&[input.0]);
        self.push(out, Op::PixelShuffle { input: input.0, r }, rg)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (mut a, mut b) = (a, b);
        if matches!(kind, BinKind::Add | BinKind::Mul)
            && self.value(a).numel() < self.value(b).numel()
        {
            std::mem::swap(&mut a, &mut b);
        }
        let bcast = Bcast::resolve(self.value(a).shape(), self.value(b).shape())?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bcast.index(i)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            out,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            rg,
        )
    }

    /// Elementwise sum; `b` may be a scalar or broadcast along size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::ScalarMul { a: a.0, c }, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar { a: a.0 }, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Op::LeakyRelu { a: a.0, slope }, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs { a: a.0 }, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square { a: a.0 }, |x| x * x)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log { a: a.0 }, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt { a: a.0 }, f64::sqrt)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, rg)
    }

    /// Softmax of a rank-1 vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(Error::shape(format!("softmax expects a vector, got {:?}", v.shape())));
        }
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.data().iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let out = Tensor::from_vec(e.into_iter().map(|x| x / z).collect());
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Softmax { a: a.0 }, rg)
    }

    /// Element `index` of `a` (flat indexing) as a one-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.numel() {
            return Err(Error::shape(format!("select {index} out of {} elements", v.numel())));
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Select { a: a.0, index }, rg)
    }

    /// Population standard deviation, floored at 1e-8.
    pub fn std(&mut self, a: Var, layout: StdLayout) -> Result<Var> {
        let [n, c, _, _] = self.value(a).dims4()?;
        let (groups, shape) = match layout {
            StdLayout::PerChannel => (n * c, vec![n, c, 1, 1]),
            StdLayout::PerSample => (n, vec![n, 1, 1, 1]),
        };
        let x = self.value(a).data();
        let len = x.len() / groups;
        let out: Vec<f64> = x
            .chunks(len)
            .map(|chunk| {
                let m = chunk.iter().sum::<f64>() / len as f64;
                let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape, out)?, Op::Std { a: a.0 }, rg)
    }

    pub fn std_over_channels(&mut self, a: Var) -> Result<Var> {
        self.std(a, StdLayout::PerChannel)
    }

    /// `clamp(round(x / s), lo, hi) * s` with straight-through gradients.
    ///
    /// `x` passes gradient where `lo <= x/s <= hi`. The step receives
    /// `round(x/s) - x/s` inside the range and the clamp bound outside,
    /// multiplied by `grad_scale`.
    pub fn fake_quant(&mut self, x: Var, step: Var, lo: f64, hi: f64, grad_scale: f64) -> Result<Var> {
        if self.value(step).numel() != 1 {
            return Err(Error::shape("fake_quant: step must be a scalar"));
        }
        let s = self.value(step).item();
        if s <= 0.0 {
            return Err(Error::config(format!("fake_quant: non-positive step {s}")));
        }
        let out = self.value(x).map(|v| (v / s).round().clamp(lo, hi) * s);
        let rg = self.rg(&[x.0, step.0]);
        self.push(
            out,
            Op::FakeQuant {
                x: x.0,
                step: step.0,
                lo,
                hi,
                grad_scale,
            },
            rg,
        )
    }

    /// Per-channel normalization over `N, H, W` with batch statistics.
    /// Returns the normalized tensor and the batch mean and variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xd[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
            }
            mean[ci] = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                v += xd[(ni * c + ci) * hw..][..hw]
                    .iter()
                    .map(|t| (t - mean[ci]) * (t - mean[ci]))
                    .sum::<f64>();
            }
            var[ci] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xd.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                for v in &mut out[(ni * c + ci) * hw..][..hw] {
                    *v = (*v - mean[ci]) * inv_std[ci];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        let v = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::BatchNorm { x: x.0, inv_std },
            rg,
        )?;
        Ok((v, mean, var))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the parameters' accumulators (repeated calls accumulate); gradients of
    /// every node are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visits += 1;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient reaching {}",
                    op_name(&self.nodes[i].op)
                )));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.last_visits = visits;
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(p), Some(g)) = (&node.param, g) {
                p.accumulate_grad(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let r = conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    g,
                    (wants(*input), wants(*kernel), bias.is_some_and(wants)),
                );
                if let Some(d) = r.input {
                    acc(*input, &mut |s| add_into(s, &d));
                }
                if let Some(d) = r.kernel {
                    acc(*kernel, &mut |s| add_into(s, &d));
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    acc(*b, &mut |s| add_into(s, &d));
                }
            }
            Op::PixelShuffle { input, r } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let d = pixel_unshuffle(&gt, *r).expect("pixel_unshuffle of recorded shape");
                acc(*input, &mut |s| add_into(s, d.data()));
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| match kind {
                    BinKind::Add | BinKind::Sub => add_into(s, g),
                    BinKind::Mul => {
                        for (k, sk) in s.iter_mut().enumerate() {
                            *sk += g[k] * bv[bcast.index(k)];
                        }
                    }
                    BinKind::Div => {
                        for (k, sk) in s.iter_mut().enumerate() {
                            *sk += g[k] / bv[bcast.index(k)];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (k, &gk) in g.iter().enumerate() {
                        let bi = bcast.index(k);
                        s[bi] += match kind {
                            BinKind::Add => gk,
                            BinKind::Sub => -gk,
                            BinKind::Mul => gk * av[k],
                            BinKind::Div => -gk * av[k] / (bv[bi] * bv[bi]),
                        };
                    }
                });
            }
            Op::ScalarMul { a, c } => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(sk, gk)| *sk += c * gk)
            }),
            Op::AddScalar { a } => acc(*a, &mut |s| add_into(s, g)),
            Op::LeakyRelu { a, slope } => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += if x[k] > 0.0 { g[k] } else { slope * g[k] };
                    }
                })
            }
            Op::Sum { a } => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean { a } => {
                let n = self.nodes[*a].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Abs { a } => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sign(x[k]);
                    }
                })
            }
            Op::Square { a } => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * x[k] * g[k];
                    }
                })
            }
            Op::Log { a } => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                })
            }
            Op::Sqrt { a } => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * 0.5 / out[k];
                }
            }),
            Op::Softmax { a } => {
                let dot: f64 = g.iter().zip(out).map(|(gk, yk)| gk * yk).sum();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += out[k] * (g[k] - dot);
                    }
                })
            }
            Op::Select { a, index } => acc(*a, &mut |s| s[*index] += g[0]),
            Op::Std { a } => {
                let x = val(*a);
                let groups = out.len();
                let len = x.len() / groups;
                acc(*a, &mut |s| {
                    for gi in 0..groups {
                        let sd = out[gi];
                        if sd <= STD_FLOOR {
                            continue;
                        }
                        let chunk = &x[gi * len..(gi + 1) * len];
                        let m = chunk.iter().sum::<f64>() / len as f64;
                        for (k, &xk) in chunk.iter().enumerate() {
                            s[gi * len + k] += g[gi] * (xk - m) / (len as f64 * sd);
                        }
                    }
                })
            }
            Op::FakeQuant {
                x,
                step,
                lo,
                hi,
                grad_scale,
            } => {
                let xv = val(*x);
                let sv = val(*step)[0];
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        let v = xv[k] / sv;
                        if v >= *lo && v <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
                acc(*step, &mut |s| {
                    let mut ds = 0.0;
                    for k in 0..xv.len() {
                        let v = xv[k] / sv;
                        let d = if v < *lo {
                            *lo
                        } else if v > *hi {
                            *hi
                        } else {
                            v.round() - v
                        };
                        ds += g[k] * d;
                    }
                    s[0] += ds * grad_scale;
                });
            }
            Op::BatchNorm { x, inv_std } => {
                let [n, c, h, w] = self.nodes[i].value.dims4().expect("bn shape");
                let hw = h * w;
                let m = (n * hw) as f64;
                acc(*x, &mut |s| {
                    for ci in 0..c {
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                sg += g[k];
                                sgx += g[k] * out[k];
                            }
                        }
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                s[k] += inv_std[ci] / m * (m * g[k] - sg - out[k] * sgx);
                            }
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::PixelShuffle { .. } => "pixel_shuffle",
        Op::Binary { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::ScalarMul { .. } => "scalar_mul",
        Op::AddScalar { .. } => "add_scalar",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Abs { .. } => "abs",
        Op::Square { .. } => "square",
        Op::Log { .. } => "log",
        Op::Sqrt { .. } => "sqrt",
        Op::Softmax { .. } => "softmax",
        Op::Select { .. } => "select",
        Op::Std { .. } => "std",
        Op::FakeQuant { .. } => "fake_quant",
        Op::BatchNorm { .. } => "batch_norm",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_sum_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, None, ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn identity_kernel() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64).sin());
        let x = g.constant(t.clone());
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, None, ConvParams::default()).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let r = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(r).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let c = g.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
        let sd = g.std_over_channels(c).unwrap();
        assert_eq!(g.value(sd).shape(), &[2, 3, 1, 1]);
        assert!(g.value(sd).data().iter().all(|&v| v <= 1e-8));
        let l = g.constant(Tensor::from_vec(vec![-3.0, 2.0]));
        let l = g.leaky_relu(l, 0.2).unwrap();
        assert_eq!(g.value(l).data(), &[-0.6000000000000001, 2.0]);
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3, 2, 2]));
        let ch = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.mul(a, ch).unwrap();
        assert_eq!(g.value(y).data()[4], 2.0);
        let per_sample = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 5.0]).unwrap());
        let y = g.add(a, per_sample).unwrap();
        assert_eq!(g.value(y).data()[12], 6.0);
        let bad = g.constant(Tensor::ones(&[2, 2, 1, 1]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
        let v = g.constant(Tensor::ones(&[5]));
        assert!(g.sub(v, a).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let w = Param::new("w", ParamGroup::Weight, Tensor::from_vec(vec![1.0, -2.0, 3.5]));
        let mut g = Graph::new();
        let wv = g.param(&w);
        let l = g.sum(wv).unwrap();
        g.backward(l).unwrap();
        assert_eq!(w.grad().data(), &[1.0, 1.0, 1.0]);

        w.zero_grad();
        let mut g = Graph::new();
        let wv = g.param(&w);
        let sq = g.square(wv).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scalar_mul(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert_eq!(w.grad().data(), w.value().data());
        // a second backward accumulates
        g.backward(l).unwrap();
        assert_eq!(w.grad().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[2]));
        let y = g.scalar_mul(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        // diamond: y = x*x + x, every node reachable through two paths
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.add(b, a).unwrap();
        let l = g.sum(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(g.last_backward_visits(), 5);
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 9.0]);
    }

    #[test]
    fn group_filter_detaches_other_params() {
        let w = Param::new("w", ParamGroup::Weight, Tensor::from_vec(vec![2.0]));
        let a = Param::new("a", ParamGroup::Arch, Tensor::from_vec(vec![3.0]));
        let mut g = Graph::for_group(ParamGroup::Arch);
        let (wv, av) = (g.param(&w), g.param(&a));
        let p = g.mul(wv, av).unwrap();
        g.backward(p).unwrap();
        assert_eq!(w.grad().data(), &[0.0]);
        assert_eq!(a.grad().data(), &[2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }
}
