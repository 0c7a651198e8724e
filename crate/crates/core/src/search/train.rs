use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{iterations, BatchStream, BATCH_STREAM, NOISE_STREAM};
use crate::config::{OptimizerKind, TrainConfig};
use crate::data::{bicubic_upscale, Sample, Splits};
use crate::error::{Error, Result};
use crate::objective::l1_loss;
use crate::optim::{cosine_lr, zero_grads, Adam, Sgd};
use crate::bitmixer::SanScaling;
use crate::quant::NoiseDist;
use crate::supernet::{instantiate, ForwardOpts, Genotype, LayerChoice, Network, SearchSpaceSpec, SPACE_VERSION};
use crate::tensor::{Graph, ParamGroup, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// PSNR in dB of the luma channel; `+inf` when the images are identical.
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("psnr: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let [n, c, h, w] = pred.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("psnr needs RGB input, got {c} channels")));
    }
    let hw = h * w;
    let (p, t) = (pred.data(), target.data());
    let mut se = 0.0;
    for ni in 0..n {
        for i in 0..hw {
            let y = |d: &[f64]| (0..3).map(|ch| LUMA[ch] * d[(ni * 3 + ch) * hw + i]).sum::<f64>();
            let e = y(p) - y(t);
            se += e * e;
        }
    }
    let mse = se / (n * hw) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn clip01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Mean per-image PSNR of the network's clipped output.
pub fn evaluate_psnr(net: &Network, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = clip01(&net.predict(&s.lr)?);
        total += psnr(&out, &s.hr)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mean per-image PSNR of bicubic upscaling.
pub fn bicubic_psnr(samples: &[Sample], scale: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += psnr(&clip01(&bicubic_upscale(&s.lr, scale)?), &s.hr)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// PSNR of one held-out image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub image: usize,
    pub psnr: f64,
    pub bicubic_psnr: f64,
}

/// Per-image PSNR of the network and of bicubic upscaling.
pub fn psnr_table(net: &Network, samples: &[Sample]) -> Result<Vec<PsnrRow>> {
    let scale = net.skeleton().scale;
    samples
        .iter()
        .enumerate()
        .map(|(image, s)| {
            Ok(PsnrRow {
                image,
                psnr: psnr(&clip01(&net.predict(&s.lr)?), &s.hr)?,
                bicubic_psnr: psnr(&clip01(&bicubic_upscale(&s.lr, scale)?), &s.hr)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub psnr: f64,
    pub bicubic_psnr: f64,
    pub final_l1: f64,
}

enum Opt {
    Sgd(Sgd),
    /// Adam for weights, SGD for quantizer steps.
    Adam(Adam, Sgd),
}

/// Trains every weight of `net` on `samples` with L1; returns the mean loss
/// of the last epoch.
///
/// With Adam, quantizer steps stay on momentum SGD: their gradients are
/// scaled for SGD, and Adam's unit-size updates overrun steps of order 1e-3.
pub fn train_network(net: &Network, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    let params = net.weight_params();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Opt::Sgd(Sgd::new(params.clone(), cfg.momentum, cfg.weight_decay)),
        OptimizerKind::Adam => {
            let steps = net.step_params();
            let weights = params.iter().filter(|p| !steps.iter().any(|s| s.ptr_eq(p))).cloned().collect();
            Opt::Adam(Adam::new(weights, cfg.weight_decay), Sgd::new(steps, cfg.momentum, 0.0))
        }
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let iters = iterations(samples.len(), cfg.batch_size, cfg.iters_per_epoch);
    let total = cfg.epochs * iters;
    let mut stream = BatchStream::new(samples, cfg.batch_size);
    let opts = ForwardOpts::train(NoiseDist::Gaussian, SanScaling::Range, true);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        stream.reshuffle(&mut batch_rng);
        let mut sum = 0.0;
        for it in 0..iters {
            let (lr, hr) = stream.next(&mut batch_rng)?;
            let mut g = Graph::for_group(ParamGroup::Weight);
            let x = g.constant(lr);
            let t = g.constant(hr);
            let y = net.forward(&mut g, x, &opts, &mut noise_rng)?;
            let loss = l1_loss(&mut g, y, t)?;
            zero_grads(&params);
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("training epoch {epoch}, iteration {it}: {m}")),
                other => other,
            })?;
            let step_lr = cosine_lr(cfg.lr, epoch * iters + it, total);
            match &mut opt {
                Opt::Sgd(o) => o.step(step_lr),
                Opt::Adam(a, s) => {
                    a.step(step_lr);
                    s.step(step_lr);
                }
            }
            sum += g.value(loss).item();
        }
        last = sum / iters as f64;
        log::debug!("train epoch {epoch}: l1 {last:.5}");
    }
    Ok(last)
}

/// Trains a freshly initialized network for `genotype` on both training
/// splits and evaluates it on the held-out split.
pub fn retrain(genotype: &Genotype, splits: &Splits, cfg: &TrainConfig) -> Result<(Network, TrainMetrics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = instantiate(genotype, &mut rng)?;
    let final_l1 = train_network(&net, &splits.train(), cfg)?;
    let metrics = TrainMetrics {
        psnr: evaluate_psnr(&net, &splits.valid)?,
        bicubic_psnr: bicubic_psnr(&splits.valid, genotype.scale)?,
        final_l1,
    };
    Ok((net, metrics))
}

/// A uniformly random choice from every layer's catalog and bit list.
pub fn random_genotype<R: Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> Result<Genotype> {
    let plans = spec.plans()?;
    let layers = plans
        .iter()
        .map(|p| LayerChoice {
            block: p.id.block,
            index: p.id.index,
            op: p.ops[rng.random_range(0..p.ops.len())].clone(),
            bits: p.bits[rng.random_range(0..p.bits.len())],
        })
        .collect();
    Ok(Genotype {
        space_version: SPACE_VERSION,
        channels: spec.channels,
        body_repeats: spec.body_repeats,
        scale: spec.scale,
        layers,
        alpha_margins: Vec::new(),
    })
}
