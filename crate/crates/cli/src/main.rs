use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use dmagaze::config::{describe, RunConfig};
use dmagaze::data::{Dataset, DatasetSpec};
use dmagaze::losses::format_degrees;
use dmagaze::train::checkpoint::{checkpoint_load, checkpoint_save};
use dmagaze::train::export::{dump_attention, sweep, sweep_csv, SweepParam};
use dmagaze::train::suite::{run_suite, SUITE_SEEDS};
use dmagaze::train::{constant_baseline, evaluate, metrics_csv, Trainer};

#[derive(Parser)]
#[command(
    name = "dmagaze",
    version,
    about = "Gaze estimation with disentangled multi-scale attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2500)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of samples in the training split.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        /// Take image sizes from this config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write only the descriptor, no images.
        #[arg(long)]
        no_images: bool,
    },
    /// Train a model, writing checkpoint.bin, metrics.csv and config.toml.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// tensor, layers, attention, losses or model.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = SUITE_SEEDS.end)]
        seeds: u64,
    },
    /// Write mask and spatial-attention heatmaps for one sample.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id within the dataset.
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; the default dataset (seed 7, 2500 samples) otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Retrain once per value of a hyperparameter and tabulate the results.
    Sweep {
        /// k_rounds or sigma.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; generated from seed 7 otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// CSV path; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(dir: &Path, config: &RunConfig) -> Result<Dataset> {
    let spec =
        DatasetSpec::load(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    spec.check_model(&config.model)?;
    info!("generating {} samples from {}", spec.count, dir.display());
    Ok(Dataset::generate(&spec)?)
}

fn gen_data(
    seed: u64,
    count: usize,
    out: &Path,
    split: f64,
    config: Option<&Path>,
    no_images: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    let spec = DatasetSpec::new(seed, count, split, &cfg.model);
    spec.validate()?;
    if no_images {
        let data = Dataset {
            spec,
            train: Vec::new(),
            test: Vec::new(),
        };
        data.save_descriptor(out)?;
    } else {
        let data = Dataset::generate(&spec)?;
        data.dump(out)?;
        println!(
            "{} train / {} test samples written to {}",
            data.train.len(),
            data.test.len(),
            out.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let ck = checkpoint_load(p).with_context(|| format!("loading {}", p.display()))?;
            if config.is_some() || batch.is_some() || seed.is_some() {
                bail!("--resume takes its configuration from the checkpoint; only --epochs may change");
            }
            ck.into_trainer()?
        }
        None => {
            let mut cfg = load_config(config)?;
            if let Some(b) = batch {
                cfg.train.batch_size = b;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            Trainer::new(&cfg)?
        }
    };
    if let Some(e) = epochs {
        trainer.state.config.train.epochs = e;
    }
    let cfg = trainer.state.config.clone();
    let dataset = load_data(data, &cfg)?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    info!("{}", describe(&cfg.model));
    info!("{} parameters", trainer.params.num_scalars());

    let t0 = Instant::now();
    while trainer.state.epoch < cfg.train.epochs {
        let m = trainer.run_epoch(&dataset)?;
        checkpoint_save(&out.join("checkpoint.bin"), &trainer)?;
        std::fs::write(out.join("metrics.csv"), metrics_csv(&trainer.history))?;
        println!(
            "epoch {:>3}  lr {:.1e}  Lg {:.4}  L1 {:.4}  L2 {:.4}  test {}°",
            m.epoch,
            m.lr,
            m.lg,
            m.l1,
            m.l2,
            format_degrees(m.test_error_deg)
        );
    }
    println!(
        "finished in {:.1}s; outputs in {}",
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, report: Option<&Path>) -> Result<()> {
    let trainer = checkpoint_load(checkpoint)?.into_trainer()?;
    let cfg = &trainer.state.config;
    let dataset = load_data(data, cfg)?;
    let ev = evaluate(
        &trainer.model,
        &trainer.params,
        &dataset.test,
        cfg.train.batch_size,
    )?;
    let constant = constant_baseline(&dataset.test)?;
    if let Some(p) = report {
        std::fs::write(p, ev.to_csv())?;
    }
    println!("test samples:        {}", ev.predictions.len());
    println!(
        "mean angular error:  {}°",
        format_degrees(ev.mean_error_deg)
    );
    println!(
        "constant (0,0):      {}°",
        format_degrees(constant.mean_error_deg)
    );
    Ok(())
}

fn gradcheck(module: Option<&str>, seeds: u64) -> Result<bool> {
    let t0 = Instant::now();
    let results = run_suite(module, 0..seeds)?;
    let mut ok = true;
    let mut i = 0;
    while i < results.len() {
        let group: Vec<_> = results[i..]
            .iter()
            .take_while(|r| r.module == results[i].module && r.name == results[i].name)
            .collect();
        let worst = group.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let passed = group.iter().all(|r| r.passed());
        ok &= passed;
        println!(
            "{} {:<10} {:<22} max rel error {:.2e} (tol {:.0e}, {} seeds)",
            if passed { "PASS" } else { "FAIL" },
            group[0].module,
            group[0].name,
            worst,
            group[0].tolerance,
            group.len()
        );
        i += group.len();
    }
    println!(
        "{} checks in {:.1}s",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn dump(checkpoint: &Path, sample: usize, out: &Path, data: Option<&Path>) -> Result<()> {
    let trainer = checkpoint_load(checkpoint)?.into_trainer()?;
    let model_cfg = &trainer.state.config.model;
    let spec = match data {
        Some(d) => DatasetSpec::load(d)?,
        None => DatasetSpec::new(7, 2500, 0.8, model_cfg),
    };
    spec.check_model(model_cfg)?;
    let s = spec.sample(sample)?;
    let d = dump_attention(&trainer.model, &trainer.params, &s, out)?;
    for f in &d.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run_sweep(
    param: SweepParam,
    values: &[f64],
    config: Option<&Path>,
    data: Option<&Path>,
    count: Option<usize>,
    epochs: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let dataset = match data {
        Some(d) => load_data(d, &cfg)?,
        None => Dataset::generate(&DatasetSpec::new(7, count.unwrap_or(2500), 0.8, &cfg.model))?,
    };
    let rows = sweep(&cfg, &dataset, param, values)?;
    let csv = sweep_csv(&rows);
    match out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            split,
            config,
            no_images,
        } => gen_data(seed, count, &out, split, config.as_deref(), no_images),
        Command::Train {
            config,
            data,
            out,
            epochs,
            batch,
            seed,
            resume,
        } => train(
            config.as_deref(),
            &data,
            &out,
            epochs,
            batch,
            seed,
            resume.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            report,
        } => eval(&checkpoint, &data, report.as_deref()),
        Command::Gradcheck { module, seeds } => match gradcheck(module.as_deref(), seeds) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::DumpAttention {
            checkpoint,
            sample,
            out,
            data,
        } => dump(&checkpoint, sample, &out, data.as_deref()),
        Command::Sweep {
            param,
            values,
            config,
            data,
            count,
            epochs,
            out,
        } => run_sweep(
            param,
            &values,
            config.as_deref(),
            data.as_deref(),
            count,
            epochs,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
