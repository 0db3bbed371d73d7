use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use shrinkmeta::discovery::{evaluate_selection, rank_modules, SelectionRule};
use shrinkmeta::driver::{meta_test, meta_train_with, read_checkpoint, read_run, write_run, ExperimentConfig, TrainOptions};
use shrinkmeta::oracle::run_suite;
use shrinkmeta::taskgen::{gen_hier_normal_tasks, gen_sinusoid_tasks, TaskSpec};
use shrinkmeta::Error;

#[derive(Parser)]
#[command(name = "shrinkmeta", version, about = "Modular Bayesian shrinkage meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from a JSON experiment config and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads; overrides SHRINKMETA_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Adapt the learned prior on held-out tasks and print the mean
    /// validation loss after each step.
    Test {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
    },
    /// Rank modules by learned σ² and optionally evaluate a selection.
    Discover {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, conflicts_with = "threshold")]
        top_k: Option<usize>,
        /// Select modules with σ² strictly above this value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Held-out tasks for the masked-adaptation comparison; 0 skips it.
        #[arg(long, default_value_t = 0)]
        eval_tasks: usize,
    },
    /// Run the closed-form invariant suite and print a pass/fail table.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate tasks from a JSON task spec as JSON on stdout.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn train(config: &Path, out: &Path, resume: bool, threads: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&read_text(config)?)?;
    let resume = if resume {
        Some(read_checkpoint(out).with_context(|| format!("loading checkpoint from {}", out.display()))?)
    } else {
        None
    };
    let opts = TrainOptions {
        threads,
        resume,
        stop_after: None,
    };
    let record = match meta_train_with(&cfg, opts) {
        Ok(r) => r,
        Err(Error::NonFiniteMeta { step, last_good }) => {
            fs::create_dir_all(out)?;
            let path = out.join("checkpoint.json");
            fs::write(&path, serde_json::to_string_pretty(&last_good)?)?;
            bail!(
                "meta parameters became non-finite at step {step}; last good checkpoint written to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    let files = write_run(&record, out)?;
    let sigma2 = record.meta.sigma2_vec();
    eprintln!(
        "trained {} steps of {}; sigma2 = {:?}; wrote {}",
        record.metrics.len(),
        cfg.algorithm.name(),
        sigma2,
        files.metrics.display()
    );
    Ok(())
}

fn test(run: &Path, steps: usize, tasks: usize) -> Result<()> {
    let record = read_run(run)?;
    let held = record.config.held_out_tasks(tasks)?;
    let traj = meta_test(&record.config, &record.meta, record.alphas.as_deref(), &held, steps)?;
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["step", "mean_val_loss"])?;
    for k in 0..=steps {
        let mean = traj.iter().map(|t| t.val_loss[k]).sum::<f64>() / traj.len().max(1) as f64;
        w.write_record([k.to_string(), mean.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn discover(run: &Path, top_k: Option<usize>, threshold: Option<f64>, eval_tasks: usize) -> Result<()> {
    let record = read_run(run)?;
    let (model, partition) = record.config.build_model()?;
    let mut report = rank_modules(&record.meta, &partition)?;
    let rule = match (top_k, threshold) {
        (Some(k), _) => Some(SelectionRule::TopK(k)),
        (None, Some(t)) => Some(SelectionRule::Threshold(t)),
        (None, None) => None,
    };
    if let Some(rule) = rule {
        let chosen = report.select(rule).modules.clone();
        if eval_tasks > 0 {
            let held = record.config.held_out_tasks(eval_tasks)?;
            let all: Vec<usize> = (0..partition.len()).collect();
            let inner = &record.config.inner;
            let masked = evaluate_selection(&mut report, model.as_ref(), &held, &record.meta, &partition, &chosen, inner)?;
            let full = evaluate_selection(&mut report, model.as_ref(), &held, &record.meta, &partition, &all, inner)?;
            eprintln!("masked val loss {masked:.6} vs full {full:.6} over {eval_tasks} tasks");
        }
    }
    report.write_csv(io::stdout().lock())?;
    fs::write(run.join("discovery.json"), report.to_json()?)?;
    Ok(())
}

fn oracle_check(seed: u64) -> Result<bool> {
    let rows = run_suite(seed)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = io::stdout().lock();
    for r in &rows {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<width$}  {mark}  {}", r.name, r.detail)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} checks, {failed} failed", rows.len())?;
    Ok(failed == 0)
}

fn gen(spec: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let spec: TaskSpec = serde_json::from_str(&read_text(spec)?)?;
    let json = match &spec {
        TaskSpec::HierNormal(s) => serde_json::to_string_pretty(&gen_hier_normal_tasks(s, seed)?)?,
        TaskSpec::Sinusoid { spec, tasks } => serde_json::to_string_pretty(&gen_sinusoid_tasks(spec, *tasks, seed)?)?,
    };
    match out {
        Some(p) => fs::write(p, json + "\n")?,
        None => writeln!(io::stdout().lock(), "{json}")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            resume,
            threads,
        } => train(&config, &out, resume, threads).map(|_| true),
        Command::Test { run, steps, tasks } => test(&run, steps, tasks).map(|_| true),
        Command::Discover {
            run,
            top_k,
            threshold,
            eval_tasks,
        } => discover(&run, top_k, threshold, eval_tasks).map(|_| true),
        Command::OracleCheck { seed } => oracle_check(seed),
        Command::Gen { spec, seed, out } => gen(&spec, seed, out.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
