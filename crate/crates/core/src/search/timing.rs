use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Searcher;
use crate::bitmixer::Strategy;
use crate::config::{BenchConfig, SearchConfig};
use crate::data::{batch, Sample};
use crate::error::{Error, Result};
use crate::ops::{op_eval_count, reset_op_eval_count};
use crate::supernet::{SearchSpaceSpec, Supernet};
use crate::tensor::{conv_call_count, reset_conv_call_count};

/// Candidate bit widths for a benchmark with `n` of them.
pub fn bit_set(n: usize) -> Result<Vec<u32>> {
    match n {
        1 => Ok(vec![8]),
        2 => Ok(vec![4, 8]),
        3 => Ok(vec![2, 4, 8]),
        _ => Err(Error::config(format!("bench.bit_counts: {n} is outside 1..=3"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: Strategy,
    pub n_bits: usize,
    pub iterations: usize,
    pub seconds: f64,
    /// Candidate-operation evaluations over all forward passes.
    pub op_evals: u64,
    /// Convolution kernel invocations over all forward passes.
    pub conv_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRatio {
    pub n_bits: usize,
    pub san_over_shared: f64,
    pub shared_over_independent: f64,
    pub san_over_independent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    pub ratios: Vec<TimingRatio>,
}

impl TimingReport {
    pub fn seconds(&self, strategy: Strategy, n_bits: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.n_bits == n_bits)
            .map(|r| r.seconds)
    }

    fn ratios_from(rows: &[TimingRow]) -> Vec<TimingRatio> {
        let mut counts: Vec<usize> = rows.iter().map(|r| r.n_bits).collect();
        counts.dedup();
        let find = |s: Strategy, n: usize| rows.iter().find(|r| r.strategy == s && r.n_bits == n).map(|r| r.seconds);
        counts
            .into_iter()
            .map(|n| {
                let ratio = |a: Strategy, b: Strategy| match (find(a, n), find(b, n)) {
                    (Some(x), Some(y)) => x / y,
                    _ => f64::NAN,
                };
                TimingRatio {
                    n_bits: n,
                    san_over_shared: ratio(Strategy::San, Strategy::Shared),
                    shared_over_independent: ratio(Strategy::Shared, Strategy::Independent),
                    san_over_independent: ratio(Strategy::San, Strategy::Independent),
                }
            })
            .collect()
    }
}

/// Times `bench.iterations` search iterations of the same supernet, data and
/// seed under every strategy and bit count.
pub fn timing_bench(
    spec: &SearchSpaceSpec,
    samples: &[Sample],
    search: &SearchConfig,
    bench: &BenchConfig,
) -> Result<TimingReport> {
    if samples.is_empty() {
        return Err(Error::config("timing benchmark needs at least one sample"));
    }
    let idx: Vec<usize> = (0..bench.batch_size).map(|i| i % samples.len()).collect();
    let (lr, hr) = batch(samples, &idx)?;
    let mut rows = Vec::new();
    for &n in &bench.bit_counts {
        let space = SearchSpaceSpec {
            bits: bit_set(n)?,
            ..spec.clone()
        };
        for &strategy in &bench.strategies {
            let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
            let net = Supernet::build(&space, strategy, &mut rng)?;
            let cfg = SearchConfig {
                strategy,
                ..search.clone()
            };
            let mut searcher = Searcher::new(&net, &cfg);
            reset_op_eval_count();
            reset_conv_call_count();
            let start = Instant::now();
            for _ in 0..bench.iterations {
                searcher.step((&lr, &hr), (&lr, &hr), cfg.mu0, cfg.w_lr)?;
            }
            let seconds = start.elapsed().as_secs_f64();
            let row = TimingRow {
                strategy,
                n_bits: n,
                iterations: bench.iterations,
                seconds,
                op_evals: op_eval_count(),
                conv_calls: conv_call_count(),
            };
            log::info!("{strategy} |B|={n}: {seconds:.3} s, {} op evaluations", row.op_evals);
            rows.push(row);
        }
    }
    let ratios = TimingReport::ratios_from(&rows);
    Ok(TimingReport { rows, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_samples;

    #[test]
    fn bit_sets() {
        assert_eq!(bit_set(1).unwrap(), vec![8]);
        assert_eq!(bit_set(2).unwrap(), vec![4, 8]);
        assert_eq!(bit_set(3).unwrap(), vec![2, 4, 8]);
        assert!(bit_set(4).is_err());
    }

    #[test]
    fn counters_match_oracle() {
        let spec = SearchSpaceSpec::default();
        let samples = synthetic_samples(2, 8, 2, 0).unwrap();
        let bench = BenchConfig {
            iterations: 2,
            bit_counts: vec![1, 2, 3],
            batch_size: 2,
            ..BenchConfig::default()
        };
        let report = timing_bench(&spec, &samples, &SearchConfig::default(), &bench).unwrap();
        assert_eq!(report.rows.len(), 9);
        for r in &report.rows {
            let space = SearchSpaceSpec {
                bits: bit_set(r.n_bits).unwrap(),
                ..spec.clone()
            };
            let per_forward: u64 = space
                .plans()
                .unwrap()
                .iter()
                .map(|p| {
                    let per_edge = match r.strategy {
                        Strategy::Independent => p.bits.len(),
                        _ => 1,
                    };
                    (p.ops.len() * per_edge) as u64
                })
                .sum();
            // two forward passes per iteration
            assert_eq!(r.op_evals, 2 * bench.iterations as u64 * per_forward, "{} |B|={}", r.strategy, r.n_bits);
            assert!(r.conv_calls >= r.op_evals);
        }
        assert_eq!(report.ratios.len(), 3);
        assert!(report.ratios.iter().all(|q| q.san_over_independent > 0.0));
    }
}
