//! `quantnas`: search, retrain, evaluate and cost quantized super-resolution
//! networks.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 non-finite value
//! during training, 3 file system error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quantnas::bitmixer::Strategy;
use quantnas::config::RunConfig;
use quantnas::data::write_synthetic_dataset;
use quantnas::io::{write_csv, write_json};
use quantnas::objective::CostReport;
use quantnas::search::{pareto_sweep, psnr_table, retrain, search, timing_bench};
use quantnas::supernet::{instantiate, Checkpoint, Genotype, SearchSpaceSpec, Supernet};
use quantnas::Error;

#[derive(Parser)]
#[command(name = "quantnas", version, about = "Quantization-aware architecture search for super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed for initialization, data and batching.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpaceArgs {
    /// Search space: `default`, `full`, `degenerate` or a TOML file.
    #[arg(long)]
    space: Option<String>,
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Subcommand)]
enum Command {
    /// Search a genotype; writes genotype.json and history.csv.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        space: SpaceArgs,
        /// Hardware penalty coefficient.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Train a genotype from scratch; writes weights.json and metrics.json.
    Retrain {
        #[command(flatten)]
        common: Common,
        genotype: PathBuf,
    },
    /// PSNR table of trained weights on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        genotype: PathBuf,
        weights: PathBuf,
    },
    /// Per-layer cost CSV of a genotype or a named preset.
    Cost {
        #[command(flatten)]
        common: Common,
        genotype: Option<PathBuf>,
        /// Named network instead of a genotype file (`espcn`).
        #[arg(long, conflicts_with = "genotype")]
        preset: Option<String>,
        /// Uniform bit width for the preset.
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// Upscaling factor of the preset.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Side of the square low-resolution input.
        #[arg(long)]
        image: Option<usize>,
    },
    /// Search and retrain for each penalty value; writes sweep.csv and pareto.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        space: SpaceArgs,
        /// Penalty coefficient; repeat for several runs.
        #[arg(long)]
        eta: Vec<f64>,
    },
    /// Time search iterations per strategy and bit count; writes timing.csv.
    BenchTiming {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Write a synthetic dataset of HR/LR PNG pairs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> quantnas::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_space(cfg: &mut RunConfig, space: &SpaceArgs) -> quantnas::Result<()> {
    if let Some(s) = &space.space {
        cfg.space = SearchSpaceSpec::resolve(s)?;
    }
    if let Some(s) = space.strategy {
        cfg.search.strategy = s;
    }
    cfg.validate()
}

fn out_dir(cfg: &RunConfig) -> quantnas::Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn run(cli: Cli) -> quantnas::Result<()> {
    match cli.command {
        Command::Search { common, space, eta } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = eta {
                cfg.search.eta = e;
            }
            apply_space(&mut cfg, &space)?;
            let splits = cfg.data.splits(cfg.space.scale)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.search.seed);
            let net = Supernet::build(&cfg.space, cfg.search.strategy, &mut rng)?;
            let outcome = search(&net, &splits, &cfg.search)?;
            let dir = out_dir(&cfg)?;
            outcome.genotype.save(&dir.join("genotype.json"))?;
            outcome.history.save(&dir.join("history.csv"))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            println!("{}", outcome.genotype.to_json()?);
        }
        Command::Retrain { common, genotype } => {
            let cfg = load_config(&common)?;
            let geno = Genotype::load(&genotype)?;
            let splits = cfg.data.splits(geno.scale)?;
            let (net, metrics) = retrain(&geno, &splits, &cfg.train)?;
            let dir = out_dir(&cfg)?;
            net.checkpoint().save(&dir.join("weights.json"))?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            println!(
                "psnr {:.3} dB, bicubic {:.3} dB, final l1 {:.5}",
                metrics.psnr, metrics.bicubic_psnr, metrics.final_l1
            );
        }
        Command::Eval {
            common,
            genotype,
            weights,
        } => {
            let cfg = load_config(&common)?;
            let geno = Genotype::load(&genotype)?;
            let net = instantiate(&geno, &mut ChaCha8Rng::seed_from_u64(0))?;
            net.load_checkpoint(&Checkpoint::load(&weights)?)?;
            let splits = cfg.data.splits(geno.scale)?;
            let table = psnr_table(&net, &splits.valid)?;
            println!("image,psnr,bicubic_psnr");
            for r in &table {
                println!("{},{:.4},{:.4}", r.image, r.psnr, r.bicubic_psnr);
            }
            let n = table.len().max(1) as f64;
            let mean = table.iter().map(|r| r.psnr).sum::<f64>() / n;
            let mean_bicubic = table.iter().map(|r| r.bicubic_psnr).sum::<f64>() / n;
            println!("mean,{mean:.4},{mean_bicubic:.4}");
            if common.out.is_some() {
                write_csv(&out_dir(&cfg)?.join("eval.csv"), &table)?;
            }
        }
        Command::Cost {
            common,
            genotype,
            preset,
            bits,
            scale,
            image,
        } => {
            let cfg = load_config(&common)?;
            let side = image.unwrap_or(cfg.cost.bitops_image);
            let report = match (&genotype, preset.as_deref()) {
                (Some(p), None) => CostReport::for_genotype(&Genotype::load(p)?, (side, side), cfg.cost.convention)?,
                (None, Some("espcn")) => CostReport::espcn(bits, (side, side), scale, cfg.cost.convention)?,
                (None, Some(other)) => return Err(Error::Config(format!("--preset: unknown preset '{other}'"))),
                _ => return Err(Error::Config("cost needs a genotype file or --preset".into())),
            };
            let mut text = Vec::new();
            report.write_csv(&mut text)?;
            print!("{}", String::from_utf8_lossy(&text));
            println!(
                "total: {:.4e} flops, {:.4e} bitops ({:.3} GBitOps)",
                report.total_flops,
                report.total_bitops,
                report.total_bitops / 1e9
            );
            if common.out.is_some() {
                std::fs::write(out_dir(&cfg)?.join("cost.csv"), text)?;
            }
        }
        Command::Sweep { common, space, eta } => {
            let mut cfg = load_config(&common)?;
            if !eta.is_empty() {
                cfg.sweep.etas = eta;
            }
            apply_space(&mut cfg, &space)?;
            let splits = cfg.data.splits(cfg.space.scale)?;
            let dir = out_dir(&cfg)?.to_path_buf();
            let report = pareto_sweep(&cfg.sweep.etas, &cfg.space, &splits, &cfg.search, &cfg.train, &dir)?;
            report.save(&dir)?;
            for &i in &report.pareto {
                let r = &report.rows[i];
                println!("eta {:e}: {:.4e} bitops, {:.3} dB", r.eta, r.bitops, r.psnr);
            }
        }
        Command::BenchTiming { common, space } => {
            let mut cfg = load_config(&common)?;
            apply_space(&mut cfg, &space)?;
            let samples = cfg.data.samples(cfg.space.scale)?;
            let report = timing_bench(&cfg.space, &samples, &cfg.search, &cfg.bench)?;
            let dir = out_dir(&cfg)?;
            write_csv(&dir.join("timing.csv"), &report.rows)?;
            write_csv(&dir.join("timing_ratios.csv"), &report.ratios)?;
            for r in &report.ratios {
                println!(
                    "|B|={}: san/independent {:.3}, shared/independent {:.3}, san/shared {:.3}",
                    r.n_bits, r.san_over_independent, r.shared_over_independent, r.san_over_shared
                );
            }
        }
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let d = &cfg.data;
            d.validate(cfg.space.scale)?;
            write_synthetic_dataset(out_dir(&cfg)?, d.samples, d.hr_patch, cfg.space.scale, d.seed)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Shape(_) => 1,
        Error::NonFinite(_) => 2,
        Error::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
