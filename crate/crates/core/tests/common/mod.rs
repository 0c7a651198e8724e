//! Shared finite-difference checks and fixtures for the integration tests.

#![allow(dead_code)]

use quantnas::bitmixer::{MixContext, MixedEdge, NoiseMode, SanScaling, Strategy};
use quantnas::gradcheck::{check_gradients, weighted_sum, GradCheckReport};
use quantnas::objective::{entropy_loss, l1_loss, soft_bitops_loss, total_alpha_loss};
use quantnas::ops::OpDescriptor;
use quantnas::quant::{NoiseDist, QuantKind, QuantSpec};
use quantnas::supernet::{AdqBlock, BnMode, ForwardOpts, SearchSpaceSpec, Supernet};
use quantnas::tensor::{ConvParams, Graph, Param, ParamGroup, StdLayout, Tensor, Var};
use quantnas::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Uniform in [-2, 2] but at least `gap` away from zero (relu/abs kinks).
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn fold(report: &mut GradCheckReport, analytic: f64, numeric: f64) {
    let abs = (analytic - numeric).abs();
    report.max_abs_error = report.max_abs_error.max(abs);
    report.max_rel_error = report.max_rel_error.max(abs / (analytic.abs() + 1e-8));
    report.checked += 1;
}

fn empty_report() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    }
}

/// Central differences over every element of `params` for a scalar built
/// by `f` on a fresh graph.
pub fn check_param_gradients<F>(params: &[Param], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let out = f(&mut g)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = params.iter().map(|p| p.grad().clone()).collect();
    let eval = || -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut report = empty_report();
    for (p, a) in params.iter().zip(&analytic) {
        for k in 0..p.numel() {
            let orig = p.value().data()[k];
            p.update(|v, _| v[k] = orig + step);
            let plus = eval()?;
            p.update(|v, _| v[k] = orig - step);
            let minus = eval()?;
            p.update(|v, _| v[k] = orig);
            fold(&mut report, a.data()[k], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

pub fn conv2d_kernel() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&[2, 3, 8, 8], &mut rng);
    let k = uniform(&[4, 3, 3, 3], &mut rng);
    let b = uniform(&[4], &mut rng);
    check_gradients(&[x, k, b], STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1, 1))?;
        g.sum(y)
    })
    .unwrap()
}

pub fn grouped_and_separable_conv() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = uniform(&[2, 6, 5, 6], &mut rng);
    let dw = uniform(&[6, 1, 3, 1], &mut rng);
    let pw = uniform(&[3, 6, 1, 3], &mut rng);
    let gk = uniform(&[6, 2, 3, 3], &mut rng);
    check_gradients(&[x, dw, pw, gk], STEP, |g, v| {
        let a = g.conv2d(v[0], v[1], None, ConvParams { stride: 1, padding: (1, 0), groups: 6 })?;
        let a = g.conv2d(a, v[2], None, ConvParams { stride: 1, padding: (0, 1), groups: 1 })?;
        let b = g.conv2d(v[0], v[3], None, ConvParams::new(2, 1, 3))?;
        let sa = weighted_sum(g, a, 1)?;
        let sb = weighted_sum(g, b, 2)?;
        g.add(sa, sb)
    })
    .unwrap()
}

pub fn pixel_shuffle() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = uniform(&[2, 8, 3, 2], &mut rng);
    check_gradients(&[x], STEP, |g, v| {
        let y = g.pixel_shuffle(v[0], 2)?;
        weighted_sum(g, y, 3)
    })
    .unwrap()
}

pub fn elementwise() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = away_from_zero(&[2, 3, 2, 2], 1e-3, &mut rng);
    let b = away_from_zero(&[2, 3, 2, 2], 1e-3, &mut rng);
    let ch = away_from_zero(&[3], 0.2, &mut rng);
    let smp = away_from_zero(&[2, 1, 1, 1], 0.2, &mut rng);
    let s = away_from_zero(&[1], 0.2, &mut rng);
    check_gradients(&[a, b, ch, smp, s], STEP, |g, v| {
        let mut terms = Vec::new();
        let t = g.add(v[0], v[1])?;
        terms.push(weighted_sum(g, t, 1)?);
        let t = g.sub(v[0], v[2])?;
        terms.push(weighted_sum(g, t, 2)?);
        let t = g.mul(v[0], v[3])?;
        terms.push(weighted_sum(g, t, 3)?);
        let t = g.mul(v[4], v[1])?;
        terms.push(weighted_sum(g, t, 4)?);
        let t = g.div(v[0], v[2])?;
        terms.push(weighted_sum(g, t, 5)?);
        let t = g.scalar_mul(v[0], -1.7)?;
        terms.push(weighted_sum(g, t, 6)?);
        let t = g.relu(v[1])?;
        terms.push(weighted_sum(g, t, 7)?);
        let t = g.leaky_relu(v[1], 0.2)?;
        terms.push(weighted_sum(g, t, 8)?);
        let t = g.abs(v[0])?;
        terms.push(weighted_sum(g, t, 9)?);
        let t = g.square(v[1])?;
        terms.push(g.mean(t)?);
        let t = g.abs(v[0])?;
        let t = g.add_scalar(t, 0.5)?;
        let l = g.log(t)?;
        terms.push(weighted_sum(g, l, 10)?);
        let q = g.sqrt(t)?;
        terms.push(weighted_sum(g, q, 11)?);
        let sd = g.std_over_channels(v[0])?;
        terms.push(weighted_sum(g, sd, 12)?);
        let sd = g.std(v[1], StdLayout::PerSample)?;
        terms.push(weighted_sum(g, sd, 13)?);
        let (bn, _, _) = g.batch_norm(v[1], 1e-5)?;
        terms.push(weighted_sum(g, bn, 14)?);
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t)?;
        }
        Ok(acc)
    })
    .unwrap()
}

pub fn softmax_and_select() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let z = uniform(&[7], &mut rng);
    check_gradients(&[z], STEP, |g, v| {
        let p = g.softmax(v[0])?;
        let a = g.select(p, 2)?;
        let b = g.select(p, 5)?;
        let ab = g.mul(a, b)?;
        let w = weighted_sum(g, p, 4)?;
        g.add(ab, w)
    })
    .unwrap()
}

pub fn composite_conv_relu_mean() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = uniform(&[2, 3, 6, 6], &mut rng);
    let k1 = uniform(&[4, 3, 3, 3], &mut rng).map(|v| v * 0.3);
    let k2 = uniform(&[4, 4, 1, 1], &mut rng);
    check_gradients(&[x, k1, k2], STEP, |g, v| {
        let h = g.conv2d(v[0], v[1], None, ConvParams::new(1, 1, 1))?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, v[2], None, ConvParams::default())?;
        g.mean(h)
    })
    .unwrap()
}

/// Quantizer gradients against a surrogate whose true derivatives are the
/// straight-through ones: `s·(round(v0) - v0) + x` inside the range with
/// `v0 = x0/s0` frozen, `s·bound` outside, the step scaled by `gs`.
pub fn quantizer_ste() -> GradCheckReport {
    let mut report = empty_report();
    let x0: Vec<f64> = vec![-3.1, -1.0, -0.2, 0.1, 0.52, 0.95, 1.7, 2.6];
    let coef = |i: usize| 1.0 + i as f64 * 0.1;
    for kind in [QuantKind::WeightLsq, QuantKind::ActHwgq] {
        for bits in [2, 3, 4] {
            let s0 = 0.3;
            let spec = QuantSpec::new("s", kind, bits, s0).unwrap();
            let (lo, hi) = spec.levels();
            let gs = 1.0 / (x0.len() as f64 * hi).sqrt();
            let surrogate = |x: &[f64], s: f64| -> f64 {
                let s_eff = gs * s + (1.0 - gs) * s0;
                x.iter()
                    .zip(&x0)
                    .enumerate()
                    .map(|(i, (&xi, &xi0))| {
                        let v0 = xi0 / s0;
                        coef(i)
                            * if v0 < lo {
                                s_eff * lo
                            } else if v0 > hi {
                                s_eff * hi
                            } else {
                                s_eff * (v0.round() - v0) + xi
                            }
                    })
                    .sum()
            };
            let w = Param::new("x", ParamGroup::Weight, Tensor::from_vec(x0.clone()));
            let mut g = Graph::new();
            let xv = g.param(&w);
            let q = spec.apply(&mut g, xv).unwrap();
            let c = g.constant(Tensor::from_fn(&[x0.len()], coef));
            let p = g.mul(q, c).unwrap();
            let l = g.sum(p).unwrap();
            g.backward(l).unwrap();
            for i in 0..x0.len() {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[i] += STEP;
                xm[i] -= STEP;
                let fd = (surrogate(&xp, s0) - surrogate(&xm, s0)) / (2.0 * STEP);
                fold(&mut report, w.grad().data()[i], fd);
            }
            let fd = (surrogate(&x0, s0 + STEP) - surrogate(&x0, s0 - STEP)) / (2.0 * STEP);
            fold(&mut report, spec.step_param().grad().item(), fd);
        }
    }
    report
}

pub fn mixer_edge(strategy: Strategy, bits: &[u32], seed: u64) -> MixedEdge {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = OpDescriptor::parse("simple 3x3", 3, 4).unwrap();
    MixedEdge::new(desc, bits, strategy, "e", &mut rng).unwrap()
}

pub fn mixer_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-1.0..2.0))
}

/// Forward of one edge with noise drawn from a fixed seed.
pub fn mixer_forward(g: &mut Graph, e: &MixedEdge, x: Var, alphas: &[Var], noise_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut ctx = MixContext {
        rng: &mut rng,
        noise: NoiseMode::Sample,
        dist: NoiseDist::Gaussian,
        scaling: SanScaling::Range,
    };
    e.forward(g, x, alphas, &mut ctx)
}

/// SAN gradients in the input and the bit weights with the noise frozen.
pub fn bitmixer_san() -> GradCheckReport {
    let e = mixer_edge(Strategy::San, &[2, 4, 8], 5);
    let x = mixer_input(9);
    let a = Tensor::from_vec(vec![0.2, 0.5, 0.15]);
    check_gradients(&[x, a], STEP, |g, v| {
        let alphas: Vec<Var> = (0..3).map(|i| g.select(v[1], i)).collect::<Result<_>>()?;
        let y = mixer_forward(g, &e, v[0], &alphas, 77)?;
        weighted_sum(g, y, 5)
    })
    .unwrap()
}

/// Bit-weight gradients of the quantized strategies; quantizers are applied
/// before blending, so the output is smooth in the weights.
pub fn bitmixer_quantized_alphas() -> GradCheckReport {
    let mut report = empty_report();
    for strategy in [Strategy::Shared, Strategy::Independent] {
        let e = mixer_edge(strategy, &[2, 4, 8], 6);
        let x = mixer_input(10);
        let a = Tensor::from_vec(vec![0.3, 0.2, 0.25]);
        let r = check_gradients(&[a], STEP, |g, v| {
            let xv = g.constant(x.clone());
            let alphas: Vec<Var> = (0..3).map(|i| g.select(v[0], i)).collect::<Result<_>>()?;
            let y = mixer_forward(g, &e, xv, &alphas, 0)?;
            weighted_sum(g, y, 6)
        })
        .unwrap();
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        report.max_abs_error = report.max_abs_error.max(r.max_abs_error);
        report.checked += r.checked;
    }
    report
}

pub fn adq_block() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = uniform(&[3, 4, 4, 4], &mut rng);
    let k = uniform(&[4, 4, 3, 3], &mut rng).map(|v| v * 0.3);
    let block = AdqBlock::new("adq", 4, true);
    block.set_scalars(0.7, 0.2);
    let r = check_gradients(&[x, k], STEP, |g, v| {
        let y = block.forward(g, v[0], BnMode::Train { update_stats: false }, |g, h| {
            let c = g.conv2d(h, v[1], None, ConvParams::new(1, 1, 1))?;
            g.leaky_relu(c, 0.3)
        })?;
        weighted_sum(g, y, 7)
    })
    .unwrap();
    let params = block.params();
    let x = uniform(&[3, 4, 4, 4], &mut rng);
    let k = uniform(&[4, 4, 3, 3], &mut rng).map(|v| v * 0.3);
    let rp = check_param_gradients(&params, STEP, |g| {
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = block.forward(g, xv, BnMode::Train { update_stats: false }, |g, h| {
            let c = g.conv2d(h, kv, None, ConvParams::new(1, 1, 1))?;
            g.leaky_relu(c, 0.3)
        })?;
        weighted_sum(g, y, 8)
    })
    .unwrap();
    GradCheckReport {
        max_rel_error: r.max_rel_error.max(rp.max_rel_error),
        max_abs_error: r.max_abs_error.max(rp.max_abs_error),
        checked: r.checked + rp.checked,
    }
}

pub fn small_supernet(seed: u64) -> Supernet {
    let spec = SearchSpaceSpec {
        channels: 4,
        ..SearchSpaceSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Supernet::build(&spec, Strategy::San, &mut rng).unwrap();
    for p in net.arch_params() {
        let shape = p.value().shape().to_vec();
        p.set_value(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    }
    net
}

/// L1 gradients in prediction and target, away from the kink.
pub fn l1() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = uniform(&[2, 3, 3, 3], &mut rng);
    let d = away_from_zero(&[2, 3, 3, 3], 1e-2, &mut rng);
    let t = Tensor::from_fn(p.shape(), |i| p.data()[i] + d.data()[i]);
    check_gradients(&[p, t], STEP, |g, v| l1_loss(g, v[0], v[1])).unwrap()
}

/// Entropy, soft BitOps and their weighted total in the architecture logits,
/// plus the reconstruction term through the whole supernet with frozen noise.
pub fn alpha_losses() -> GradCheckReport {
    let net = small_supernet(3);
    let params = net.arch_params();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
    let hr = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    check_param_gradients(&params, STEP, |g| {
        let e = entropy_loss(g, &net)?;
        let cq = soft_bitops_loss(g, &net, (16, 16))?;
        let xv = g.constant(x.clone());
        let t = g.constant(hr.clone());
        let mut noise = ChaCha8Rng::seed_from_u64(21);
        let opts = ForwardOpts::train(NoiseDist::Gaussian, SanScaling::Range, false);
        let y = net.forward(g, xv, &opts, &mut noise)?;
        let rec = l1_loss(g, y, t)?;
        total_alpha_loss(g, rec, cq, e, 0.3, 0.2)
    })
    .unwrap()
}

/// Every check of the suite, named.
pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("conv2d", conv2d_kernel()),
        ("grouped/separable conv", grouped_and_separable_conv()),
        ("pixel shuffle", pixel_shuffle()),
        ("elementwise/norm", elementwise()),
        ("softmax/select", softmax_and_select()),
        ("conv-relu-mean", composite_conv_relu_mean()),
        ("quantizer STE", quantizer_ste()),
        ("bitmixer san", bitmixer_san()),
        ("bitmixer alphas", bitmixer_quantized_alphas()),
        ("adq", adq_block()),
        ("l1", l1()),
        ("alpha losses", alpha_losses()),
    ]
}
