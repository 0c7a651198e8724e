//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use quantnas::bitmixer::{MixContext, MixedEdge, NoiseMode, SanScaling, Strategy};
use quantnas::config::{BenchConfig, OptimizerKind, SearchConfig, TrainConfig};
use quantnas::data::{synthetic_samples, Splits};
use quantnas::objective::{soft_bitops_inner, CostReport, FlopConvention};
use quantnas::ops::{op_eval_count, reset_op_eval_count};
use quantnas::quant::{qnoise_sample, NoiseDelta, NoiseDist};
use quantnas::search::{random_genotype, retrain, search, timing_bench, SearchOutcome};
use quantnas::supernet::{Genotype, SearchSpaceSpec, Supernet};
use quantnas::tensor::{conv_call_count, reset_conv_call_count, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_TOL: f64 = 1e-5;
const COLLAPSE_TOL: f64 = 1e-10;
const NOISE_STD_TOL: f64 = 0.01;
const ESPCN_TARGET: f64 = 2.3e9;
const ESPCN_TOL: f64 = 0.15;
const COST_TOL: f64 = 1e-9;
const MIN_MAX_ALPHA: f64 = 0.9;
const MIN_GAIN_DB: f64 = 0.5;
const MU0: f64 = 1e-2;

struct Report {
    passed: Vec<bool>,
}

impl Report {
    fn record(&mut self, n: usize, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {n} {verdict}: {detail}").unwrap();
        out.flush().unwrap();
        self.passed.push(ok);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_splits(seed: u64) -> Splits {
    Splits::new(synthetic_samples(96, 32, 2, seed).unwrap(), 16).unwrap()
}

fn desk_search(seed: u64, eta: f64, mu0: f64) -> SearchConfig {
    SearchConfig {
        epochs: 20,
        batch_size: 8,
        iters_per_epoch: 5,
        alpha_lr: 0.1,
        mu0,
        eta,
        seed,
        ..SearchConfig::default()
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        iters_per_epoch: 40,
        batch_size: 8,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn run_search(splits: &Splits, cfg: &SearchConfig) -> SearchOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Supernet::build(&SearchSpaceSpec::default(), cfg.strategy, &mut rng).unwrap();
    search(&net, splits, cfg).unwrap()
}

fn bitops(geno: &Genotype) -> f64 {
    CostReport::for_genotype(geno, (32, 32), FlopConvention::Mac).unwrap().total_bitops
}

fn saved_bytes(outcome: &SearchOutcome) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let (g, h) = (dir.path().join("genotype.json"), dir.path().join("history.csv"));
    outcome.genotype.save(&g).unwrap();
    outcome.history.save(&h).unwrap();
    (std::fs::read(g).unwrap(), std::fs::read(h).unwrap())
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let suite = common::gradient_suite();
    let elapsed = start.elapsed();
    let worst = suite.iter().map(|(_, g)| g.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = suite.iter().filter(|(_, g)| !g.passes(GRAD_TOL)).map(|(n, _)| *n).collect();
    let checked: usize = suite.iter().map(|(_, g)| g.checked).sum();
    let ok = failing.is_empty() && elapsed < Duration::from_secs(60);
    r.record(
        1,
        ok,
        format!(
            "{} groups, {checked} gradients, worst relative error {worst:.2e}, {:.1} s{}",
            suite.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    );
}

fn edge_output(e: &MixedEdge, x: &Tensor, alphas: &[f64], noise: NoiseMode) -> Tensor {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xv = g.constant(x.clone());
    let a: Vec<Var> = alphas.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let mut ctx = MixContext {
        rng: &mut rng,
        noise,
        dist: NoiseDist::Gaussian,
        scaling: SanScaling::Range,
    };
    let y = e.forward(&mut g, xv, &a, &mut ctx).unwrap();
    g.value(y).clone()
}

fn reference_output(e: &MixedEdge, x: &Tensor, bit_index: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = if e.strategy() == Strategy::San {
        let op = &e.ops()[0];
        let ks: Vec<Var> = op.kernels().iter().map(|k| g.param(k)).collect();
        op.apply(&mut g, xv, &ks).unwrap()
    } else {
        e.single_bit_path(&mut g, xv, bit_index).unwrap()
    };
    g.value(y).clone()
}

fn bitmixer_collapse(r: &mut Report) {
    let bits = [2, 4, 8];
    let x = common::mixer_input(1);
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    let mut counts = Vec::new();
    for s in [Strategy::Independent, Strategy::Shared, Strategy::San] {
        let e = common::mixer_edge(s, &bits, 2);
        for bi in 0..bits.len() {
            let mut one_hot = vec![0.0; bits.len()];
            one_hot[bi] = 1.0;
            let noise = if s == Strategy::San { NoiseMode::Zero } else { NoiseMode::Sample };
            let y = edge_output(&e, &x, &one_hot, noise);
            worst = worst.max(y.max_abs_diff(&reference_output(&e, &x, bi)));
        }
        reset_conv_call_count();
        reset_op_eval_count();
        edge_output(&e, &x, &[0.2, 0.3, 0.5], NoiseMode::Sample);
        let expect = if s == Strategy::Independent { bits.len() as u64 } else { 1 };
        counts_ok &= conv_call_count() == expect && op_eval_count() == expect;
        counts.push(format!("{s} {}", conv_call_count()));
    }
    r.record(
        2,
        worst <= COLLAPSE_TOL && counts_ok,
        format!("max deviation {worst:.1e}, convolutions per forward at |B|=3: {}", counts.join(", ")),
    );
}

fn noise_statistics(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1_000_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for bits in [2, 4, 8] {
        let t = qnoise_sample(&[n], bits, NoiseDist::Gaussian, &mut rng);
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let target = NoiseDelta::for_bits(bits).value() / 2.0;
        let rel = std / target - 1.0;
        let z = mean / (std / (n as f64).sqrt());
        ok &= rel.abs() < NOISE_STD_TOL && z.abs() < 3.0;
        parts.push(format!("b={bits} std {std:.5} ({:+.2}%), mean {z:+.2} SE", 100.0 * rel));
    }
    r.record(3, ok, parts.join("; "));
}

fn cost_model(r: &mut Report) {
    let espcn = CostReport::espcn(8, (32, 32), 4, FlopConvention::Mac).unwrap().total_bitops;
    let espcn_ok = (espcn / ESPCN_TARGET - 1.0).abs() < ESPCN_TOL;
    let spec = SearchSpaceSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Supernet::build(&spec, Strategy::San, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let geno = random_genotype(&spec, &mut rng).unwrap();
        let choice: Vec<usize> = net
            .layers()
            .iter()
            .zip(&geno.layers)
            .map(|(l, c)| {
                let (oi, bi) = l.locate(&c.op, c.bits).unwrap();
                oi * l.bits().len() + bi
            })
            .collect();
        net.set_one_hot(&choice).unwrap();
        let mut g = Graph::new();
        let soft = soft_bitops_inner(&mut g, &net, (32, 32)).unwrap();
        worst = worst.max((g.value(soft).item() / bitops(&geno) - 1.0).abs());
    }
    r.record(
        4,
        espcn_ok && worst < COST_TOL,
        format!(
            "ESPCN x4 8-bit {:.4} GBitOps ({:+.1}% vs 2.3), one-hot soft cost worst relative gap {worst:.1e} over 20 genotypes",
            espcn / 1e9,
            100.0 * (espcn / ESPCN_TARGET - 1.0)
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { passed: Vec::new() };
    gradient_suite(&mut r);
    bitmixer_collapse(&mut r);
    noise_statistics(&mut r);
    cost_model(&mut r);

    let splits: Vec<Splits> = SEEDS.iter().map(|&s| desk_splits(s)).collect();

    let start = Instant::now();
    let entropic: Vec<SearchOutcome> = SEEDS
        .iter()
        .zip(&splits)
        .map(|(&s, sp)| run_search(sp, &desk_search(s, 0.0, MU0)))
        .collect();
    let plain: Vec<SearchOutcome> = SEEDS
        .iter()
        .zip(&splits)
        .map(|(&s, sp)| run_search(sp, &desk_search(s, 0.0, 0.0)))
        .collect();
    let entropy_time = start.elapsed();
    let stat = |o: &SearchOutcome| o.history.final_mean_max_alpha().unwrap();
    let with_mu = median(entropic.iter().map(stat).collect());
    let without_mu = median(plain.iter().map(stat).collect());
    r.record(
        5,
        with_mu > MIN_MAX_ALPHA && with_mu > without_mu && entropy_time < Duration::from_secs(30 * 60),
        format!(
            "median final max alpha {with_mu:.4} with entropy schedule vs {without_mu:.4} without, {:.0} s",
            entropy_time.as_secs_f64()
        ),
    );

    let mut monotone = 0;
    let mut rows = Vec::new();
    for ((&s, sp), base) in SEEDS.iter().zip(&splits).zip(&entropic) {
        let mut costs = vec![bitops(&base.genotype)];
        for eta in [1e-4, 1e-3] {
            costs.push(bitops(&run_search(sp, &desk_search(s, eta, MU0)).genotype));
        }
        if costs.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        rows.push(format!(
            "seed {s}: {}",
            costs.iter().map(|c| format!("{:.3e}", c)).collect::<Vec<_>>().join(" >= ")
        ));
    }
    r.record(
        6,
        monotone >= 4,
        format!("BitOps non-increasing in eta for {monotone}/5 seeds ({})", rows.join("; ")),
    );

    let bench_cfg = BenchConfig {
        iterations: 60,
        bit_counts: vec![2],
        batch_size: 8,
        ..BenchConfig::default()
    };
    let samples = synthetic_samples(96, 32, 2, 0).unwrap();
    let report = timing_bench(&SearchSpaceSpec::default(), &samples, &desk_search(0, 0.0, MU0), &bench_cfg).unwrap();
    let secs = |s: Strategy| report.seconds(s, 2).unwrap();
    let (san, shared, indep) = (secs(Strategy::San), secs(Strategy::Shared), secs(Strategy::Independent));
    r.record(
        7,
        san < indep && shared <= indep,
        format!(
            "|B|=2, 60 iterations: san {san:.2} s, shared {shared:.2} s, independent {indep:.2} s, san/independent {:.3}",
            san / indep
        ),
    );

    let start = Instant::now();
    let (mut gains, mut margins) = (Vec::new(), Vec::new());
    for ((&s, sp), base) in SEEDS.iter().zip(&splits).zip(&entropic) {
        let cfg = desk_train(s);
        let (_, searched) = retrain(&base.genotype, sp, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s + 100);
        let random: Vec<f64> = (0..5)
            .map(|_| {
                let geno = random_genotype(&SearchSpaceSpec::default(), &mut rng).unwrap();
                retrain(&geno, sp, &cfg).unwrap().1.psnr
            })
            .collect();
        gains.push(searched.psnr - searched.bicubic_psnr);
        margins.push(searched.psnr - median(random));
    }
    let e2e_time = start.elapsed();
    let (gain, margin) = (median(gains.clone()), median(margins.clone()));
    r.record(
        8,
        gain >= MIN_GAIN_DB && margin >= 0.0 && e2e_time < Duration::from_secs(2 * 3600),
        format!(
            "median gain over bicubic {gain:+.3} dB, over random-genotype median {margin:+.3} dB, {:.0} s (per seed: {})",
            e2e_time.as_secs_f64(),
            gains
                .iter()
                .zip(&margins)
                .map(|(g, m)| format!("{g:+.2}/{m:+.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let again = run_search(&splits[0], &desk_search(SEEDS[0], 0.0, MU0));
    let (a, b) = (saved_bytes(&entropic[0]), saved_bytes(&again));
    r.record(
        9,
        a == b,
        format!("rerun of seed {}: genotype {} bytes, history {} bytes, identical: {}", SEEDS[0], a.0.len(), a.1.len(), a == b),
    );

    let failed: Vec<usize> = (1..=r.passed.len()).filter(|&i| !r.passed[i - 1]).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
