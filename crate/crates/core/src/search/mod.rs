//! Alternating architecture search, retraining and the experiment drivers
//! built on them.
//!
//! Each search iteration takes one step on the architecture logits with
//! `L1 + η·L_cq + μ(t)·L_e` on a batch from the architecture split, then one
//! step on the weights with `L1` on a batch from the weight split. Each pass
//! differentiates only its own parameter group and draws its own noise.
//! Normalization statistics are updated only during weight passes.

mod sweep;
mod timing;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sweep::{non_dominated, pareto_sweep, SweepReport, SweepRow};
pub use timing::{bit_set, timing_bench, TimingRatio, TimingReport, TimingRow};
pub use train::{
    bicubic_psnr, evaluate_psnr, psnr, psnr_table, random_genotype, retrain, train_network, PsnrRow,
    TrainMetrics,
};

use crate::config::SearchConfig;
use crate::data::{batch, shuffled_batches, Sample, Splits};
use crate::error::{Error, Result};
use crate::objective::{entropy_loss, l1_loss, mu_schedule, soft_bitops_loss, total_alpha_loss, ScheduleState};
use crate::optim::{cosine_lr, zero_grads, Adam, Sgd};
use crate::supernet::{discretize, ForwardOpts, Genotype, Supernet};
use crate::tensor::{Graph, ParamGroup, Tensor};

/// Stream offsets so that initialization, noise and batching draw from
/// independent generators derived from one seed.
const NOISE_STREAM: u64 = 0x6e6f_6973_65;
const BATCH_STREAM: u64 = 0x6261_7463_68;

/// Epoch means of the search losses.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Reconstruction loss of the architecture passes.
    pub l1: f64,
    pub l_cq: f64,
    pub l_e: f64,
    pub mu: f64,
    /// Reconstruction loss of the weight passes.
    pub w_l1: f64,
    /// Largest weight of each layer at the end of the epoch.
    pub max_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub layer_ids: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "l1", "l_cq", "l_e", "mu", "w_l1"].iter().map(|s| s.to_string()).collect();
        h.extend(self.layer_ids.iter().map(|id| format!("max_alpha[{id}]")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string()];
            rec.extend([r.l1, r.l_cq, r.l_e, r.mu, r.w_l1].iter().map(|v| v.to_string()));
            rec.extend(r.max_alpha.iter().map(|v| v.to_string()));
            wr.write_record(rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let layer_ids: Vec<String> = header
            .iter()
            .skip(6)
            .map(|h| {
                h.strip_prefix("max_alpha[")
                    .and_then(|s| s.strip_suffix(']'))
                    .map(str::to_string)
                    .ok_or_else(|| Error::Parse(format!("unexpected history column '{h}'")))
            })
            .collect::<Result<_>>()?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("history value '{s}': {e}")));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 6 + layer_ids.len() {
                return Err(Error::Parse(format!("history row has {} fields", rec.len())));
            }
            rows.push(HistoryRow {
                epoch: rec[0].parse().map_err(|e| Error::Parse(format!("history epoch: {e}")))?,
                l1: num(&rec[1])?,
                l_cq: num(&rec[2])?,
                l_e: num(&rec[3])?,
                mu: num(&rec[4])?,
                w_l1: num(&rec[5])?,
                max_alpha: rec.iter().skip(6).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(History { layer_ids, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Mean over layers of the final per-layer maximum weight.
    pub fn final_mean_max_alpha(&self) -> Option<f64> {
        let last = self.rows.last()?;
        Some(last.max_alpha.iter().sum::<f64>() / last.max_alpha.len().max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub history: History,
}

/// Losses of one search iteration.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub l1: f64,
    pub l_cq: f64,
    pub l_e: f64,
    pub w_l1: f64,
}

/// Optimizer state of a running search.
pub struct Searcher<'a> {
    net: &'a Supernet,
    cfg: SearchConfig,
    w_opt: Sgd,
    a_opt: Adam,
    noise_rng: ChaCha8Rng,
}

impl<'a> Searcher<'a> {
    pub fn new(net: &'a Supernet, cfg: &SearchConfig) -> Self {
        Searcher {
            net,
            cfg: cfg.clone(),
            w_opt: Sgd::new(net.weight_params(), cfg.w_momentum, cfg.w_weight_decay),
            a_opt: Adam::new(net.arch_params(), 0.0),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM),
        }
    }

    fn image_hw(&self) -> (usize, usize) {
        (self.cfg.bitops_image, self.cfg.bitops_image)
    }

    /// Architecture step on `(lr, hr)`; returns `(l1, l_cq, l_e)`.
    pub fn alpha_step(&mut self, lr: &Tensor, hr: &Tensor, mu: f64) -> Result<(f64, f64, f64)> {
        let net = self.net;
        let mut g = Graph::for_group(ParamGroup::Arch);
        let x = g.constant(lr.clone());
        let t = g.constant(hr.clone());
        let opts = ForwardOpts::train(self.cfg.noise_dist, self.cfg.san_noise_scaling, false);
        let y = net.forward(&mut g, x, &opts, &mut self.noise_rng)?;
        let l1 = l1_loss(&mut g, y, t)?;
        let cq = soft_bitops_loss(&mut g, net, self.image_hw())?;
        let e = entropy_loss(&mut g, net)?;
        let loss = total_alpha_loss(&mut g, l1, cq, e, self.cfg.eta, mu)?;
        let params = self.a_opt.params().to_vec();
        zero_grads(&params);
        g.backward(loss)?;
        self.a_opt.step(self.cfg.alpha_lr);
        Ok((g.value(l1).item(), g.value(cq).item(), g.value(e).item()))
    }

    /// Weight step on `(lr, hr)`; returns the reconstruction loss.
    pub fn weight_step(&mut self, lr: &Tensor, hr: &Tensor, w_lr: f64) -> Result<f64> {
        let mut g = Graph::for_group(ParamGroup::Weight);
        let x = g.constant(lr.clone());
        let t = g.constant(hr.clone());
        let opts = ForwardOpts::train(self.cfg.noise_dist, self.cfg.san_noise_scaling, true);
        let y = self.net.forward(&mut g, x, &opts, &mut self.noise_rng)?;
        let l1 = l1_loss(&mut g, y, t)?;
        let params = self.w_opt.params().to_vec();
        zero_grads(&params);
        g.backward(l1)?;
        self.w_opt.step(w_lr);
        Ok(g.value(l1).item())
    }

    pub fn step(&mut self, a: (&Tensor, &Tensor), w: (&Tensor, &Tensor), mu: f64, w_lr: f64) -> Result<StepLosses> {
        let (l1, l_cq, l_e) = self.alpha_step(a.0, a.1, mu)?;
        let w_l1 = self.weight_step(w.0, w.1, w_lr)?;
        Ok(StepLosses { l1, l_cq, l_e, w_l1 })
    }
}

fn alpha_snapshot(net: &Supernet) -> String {
    net.layers()
        .iter()
        .map(|l| {
            let a = l.alpha_values();
            format!("{}: max {:.4}", l.id(), a.iter().cloned().fold(0.0, f64::max))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Iterations per epoch for `len` samples.
pub(crate) fn iterations(len: usize, batch_size: usize, configured: usize) -> usize {
    if configured > 0 {
        configured
    } else {
        len.div_ceil(batch_size).max(1)
    }
}

/// Cycles through shuffled batches, reshuffling when exhausted.
pub(crate) struct BatchStream<'s> {
    samples: &'s [Sample],
    batch_size: usize,
    queue: Vec<Vec<usize>>,
}

impl<'s> BatchStream<'s> {
    pub(crate) fn new(samples: &'s [Sample], batch_size: usize) -> Self {
        BatchStream {
            samples,
            batch_size,
            queue: Vec::new(),
        }
    }

    pub(crate) fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.queue = shuffled_batches(self.samples.len(), self.batch_size, rng);
        self.queue.reverse();
    }

    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        if self.queue.is_empty() {
            self.reshuffle(rng);
        }
        let idx = self.queue.pop().expect("non-empty after reshuffle");
        batch(self.samples, &idx)
    }
}

/// Runs the alternating search on `net` and discretizes the result.
pub fn search(net: &Supernet, splits: &Splits, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut searcher = Searcher::new(net, cfg);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let iters = iterations(splits.arch.len(), cfg.batch_size, cfg.iters_per_epoch);
    let total_steps = cfg.epochs * iters;
    let mut arch = BatchStream::new(&splits.arch, cfg.batch_size);
    let mut weights = BatchStream::new(&splits.weights, cfg.batch_size);
    let layer_ids: Vec<String> = net.layers().iter().map(|l| l.id().to_string()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mu = mu_schedule(&ScheduleState {
            epoch,
            total_epochs: cfg.epochs,
            mu0: cfg.mu0,
            eta: cfg.eta,
        });
        arch.reshuffle(&mut batch_rng);
        weights.reshuffle(&mut batch_rng);
        let mut sum = StepLosses::default();
        for it in 0..iters {
            let a = arch.next(&mut batch_rng)?;
            let w = weights.next(&mut batch_rng)?;
            let w_lr = cosine_lr(cfg.w_lr, epoch * iters + it, total_steps);
            let s = searcher.step((&a.0, &a.1), (&w.0, &w.1), mu, w_lr).map_err(|e| match e {
                Error::NonFinite(m) => {
                    let snap = alpha_snapshot(net);
                    log::error!("search aborted at epoch {epoch}, iteration {it}: {m}; {snap}");
                    Error::NonFinite(format!("epoch {epoch}, iteration {it}: {m} [{snap}]"))
                }
                other => other,
            })?;
            sum.l1 += s.l1;
            sum.l_cq += s.l_cq;
            sum.l_e += s.l_e;
            sum.w_l1 += s.w_l1;
        }
        let n = iters as f64;
        let row = HistoryRow {
            epoch,
            l1: sum.l1 / n,
            l_cq: sum.l_cq / n,
            l_e: sum.l_e / n,
            mu,
            w_l1: sum.w_l1 / n,
            max_alpha: net
                .layers()
                .iter()
                .map(|l| l.alpha_values().into_iter().fold(0.0, f64::max))
                .collect(),
        };
        log::info!(
            "epoch {epoch}: l1 {:.5} l_cq {:.4} l_e {:.4} mu {:.2e} w_l1 {:.5}",
            row.l1,
            row.l_cq,
            row.l_e,
            row.mu,
            row.w_l1
        );
        rows.push(row);
    }
    Ok(SearchOutcome {
        genotype: discretize(net, (cfg.bitops_image, cfg.bitops_image)),
        history: History { layer_ids, rows },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmixer::Strategy;
    use crate::data::synthetic_samples;
    use crate::supernet::SearchSpaceSpec;

    fn splits() -> Splits {
        Splits::new(synthetic_samples(10, 8, 2, 0).unwrap(), 2).unwrap()
    }

    fn small_cfg() -> SearchConfig {
        SearchConfig {
            epochs: 3,
            batch_size: 2,
            iters_per_epoch: 2,
            alpha_lr: 1e-2,
            mu0: 1e-2,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn passes_touch_only_their_own_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Supernet::build(&SearchSpaceSpec::default(), Strategy::San, &mut rng).unwrap();
        let s = splits();
        let (lr, hr) = batch(&s.arch, &[0, 1]).unwrap();
        let mut searcher = Searcher::new(&net, &small_cfg());
        let all: Vec<_> = net.weight_params().into_iter().chain(net.arch_params()).collect();
        zero_grads(&all);
        searcher.alpha_step(&lr, &hr, 0.1).unwrap();
        assert!(net.weight_params().iter().all(|p| p.grad().data().iter().all(|&g| g == 0.0)));
        assert!(net.arch_params().iter().any(|p| p.grad().data().iter().any(|&g| g != 0.0)));
        zero_grads(&all);
        searcher.weight_step(&lr, &hr, 1e-3).unwrap();
        assert!(net.arch_params().iter().all(|p| p.grad().data().iter().all(|&g| g == 0.0)));
        assert!(net.weight_params().iter().any(|p| p.grad().data().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn search_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let net = Supernet::build(&SearchSpaceSpec::default(), Strategy::San, &mut rng).unwrap();
            search(&net, &splits(), &small_cfg()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.genotype, b.genotype);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.rows.len(), 3);
        assert_eq!(a.history.rows[0].mu, 0.0);
        assert!(a.history.rows[2].mu > 0.0);
    }

    #[test]
    fn degenerate_space_has_zero_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Supernet::build(&SearchSpaceSpec::degenerate(), Strategy::San, &mut rng).unwrap();
        let out = search(&net, &splits(), &small_cfg()).unwrap();
        assert!(out.history.rows.iter().all(|r| r.l_e == 0.0));
        assert!(out.genotype.layers.iter().all(|c| c.bits == 8));
    }

    #[test]
    fn history_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Supernet::build(&SearchSpaceSpec::default(), Strategy::Shared, &mut rng).unwrap();
        let out = search(&net, &splits(), &small_cfg()).unwrap();
        let mut buf = Vec::new();
        out.history.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,l1,l_cq,l_e,mu,w_l1,max_alpha[head.0]"));
        assert_eq!(History::read_csv(&buf[..]).unwrap(), out.history);
    }

    #[test]
    fn non_finite_loss_aborts_with_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Supernet::build(&SearchSpaceSpec::default(), Strategy::San, &mut rng).unwrap();
        let mut s = splits();
        s.arch[0].hr = s.arch[0].hr.map(|_| f64::NAN);
        s.arch[1].hr = s.arch[1].hr.map(|_| f64::NAN);
        let cfg = SearchConfig {
            batch_size: 4,
            ..small_cfg()
        };
        match search(&net, &s, &cfg) {
            Err(Error::NonFinite(m)) => assert!(m.contains("epoch 0"), "{m}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
