use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{retrain, search};
use crate::config::{SearchConfig, TrainConfig};
use crate::data::Splits;
use crate::error::Result;
use crate::io::write_csv;
use crate::objective::{CostReport, FlopConvention};
use crate::supernet::{SearchSpaceSpec, Supernet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub bitops: f64,
    pub psnr: f64,
    pub genotype_file: String,
    /// `ok`, or the error that ended the run.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Indices into `rows` of the non-dominated completed runs.
    pub pareto: Vec<usize>,
}

impl SweepReport {
    /// Writes `sweep.csv` and `pareto.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("sweep.csv"), &self.rows)?;
        let front: Vec<&SweepRow> = self.pareto.iter().map(|&i| &self.rows[i]).collect();
        write_csv(&dir.join("pareto.csv"), &front)
    }
}

/// Indices of the points not dominated by any other, where lower BitOps and
/// higher PSNR are better. Sorted by BitOps.
pub fn non_dominated(points: &[(f64, f64)]) -> Vec<usize> {
    let dominates = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1);
    let mut keep: Vec<usize> = (0..points.len())
        .filter(|&i| !points.iter().any(|&p| dominates(p, points[i])))
        .collect();
    keep.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0));
    keep
}

fn run_one(
    eta: f64,
    space: &SearchSpaceSpec,
    splits: &Splits,
    search_cfg: &SearchConfig,
    train_cfg: &TrainConfig,
    geno_path: &Path,
) -> Result<(f64, f64)> {
    let cfg = SearchConfig {
        eta,
        ..search_cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Supernet::build(space, cfg.strategy, &mut rng)?;
    let outcome = search(&net, splits, &cfg)?;
    outcome.genotype.save(geno_path)?;
    let hw = (cfg.bitops_image, cfg.bitops_image);
    let bitops = CostReport::for_genotype(&outcome.genotype, hw, FlopConvention::Mac)?.total_bitops;
    let (_, metrics) = retrain(&outcome.genotype, splits, train_cfg)?;
    Ok((bitops, metrics.psnr))
}

/// Searches and retrains once per penalty value, saving each genotype into
/// `out_dir`. A failed run is recorded and the sweep moves on.
pub fn pareto_sweep(
    etas: &[f64],
    space: &SearchSpaceSpec,
    splits: &Splits,
    search_cfg: &SearchConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<SweepReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(etas.len());
    for (i, &eta) in etas.iter().enumerate() {
        let file = format!("genotype_{i:02}.json");
        let path: PathBuf = out_dir.join(&file);
        let row = match run_one(eta, space, splits, search_cfg, train_cfg, &path) {
            Ok((bitops, psnr)) => SweepRow {
                eta,
                bitops,
                psnr,
                genotype_file: file,
                status: "ok".into(),
            },
            Err(e) => {
                log::warn!("sweep run eta={eta} failed: {e}");
                SweepRow {
                    eta,
                    bitops: f64::NAN,
                    psnr: f64::NAN,
                    genotype_file: String::new(),
                    status: e.to_string(),
                }
            }
        };
        log::info!("eta={eta}: {} bitops, {:.3} dB ({})", row.bitops, row.psnr, row.status);
        rows.push(row);
    }
    let ok: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].is_ok()).collect();
    let points: Vec<(f64, f64)> = ok.iter().map(|&i| (rows[i].bitops, rows[i].psnr)).collect();
    let pareto = non_dominated(&points).into_iter().map(|j| ok[j]).collect();
    Ok(SweepReport { rows, pareto })
}
