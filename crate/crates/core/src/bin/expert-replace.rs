use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use expert_replace::pipeline::{
    collect_report, run_calibrate, run_compress, run_eval, run_finetune, run_pretrain, run_search_threshold,
    run_sweep, Experiment, ExperimentConfig, RunDir,
};
use expert_replace::{Error, Result};

/// Compress a toy mixture-of-experts model by expert replacement.
///
/// Phase commands work on one seed's run directory (`<out>/seed-<seed>`)
/// and must run in order: pretrain, calibrate, [search-threshold],
/// compress, finetune, eval.
#[derive(Parser)]
#[command(name = "expert-replace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Pretrain(Common),
    Calibrate(Common),
    SearchThreshold(Common),
    Compress(Common),
    Finetune(Common),
    Eval(Common),
    /// Full pipeline for every seed (and every sweep value, if configured).
    Sweep(Common),
    /// Gather every metrics.csv below the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_rho: Option<f64>,
    #[arg(long)]
    end_ratio: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    /// Output root; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.target_rho {
            cfg.selection.target_rho = v;
        }
        if let Some(v) = self.end_ratio {
            cfg.schedule.end_ratio = v;
        }
        if let Some(v) = self.rank {
            cfg.construction.rank = v;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn cell(&self) -> Result<(Experiment, RunDir)> {
        let cfg = self.config()?;
        let seed = cfg.seeds[0];
        let dir = RunDir::for_seed(&cfg.output_dir, seed)?;
        Ok((Experiment::new(cfg, seed)?, dir))
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let (exp, dir) = c.cell()?;
            run_pretrain(&exp, &dir)?;
            println!("{}", dir.root().display());
        }
        Command::Calibrate(c) => {
            let (exp, dir) = c.cell()?;
            print_json(&run_calibrate(&exp, &dir)?)?;
        }
        Command::SearchThreshold(c) => {
            let (exp, dir) = c.cell()?;
            print_json(&run_search_threshold(&exp, &dir)?)?;
        }
        Command::Compress(c) => {
            let (exp, dir) = c.cell()?;
            print_json(&run_compress(&exp, &dir)?)?;
        }
        Command::Finetune(c) => {
            let (exp, dir) = c.cell()?;
            let trace = run_finetune(&exp, &dir)?;
            let last = trace.losses.last().copied();
            print_json(&serde_json::json!({
                "steps": trace.len(),
                "final_loss": last,
                "swap_step": trace.swap_step,
                "anneal_end": trace.anneal_end,
            }))?;
        }
        Command::Eval(c) => {
            let (exp, dir) = c.cell()?;
            print_json(&run_eval(&exp, &dir, None)?)?;
        }
        Command::Sweep(c) => {
            print!("{}", run_sweep(&c.config()?)?);
        }
        Command::Report(c) => {
            let root = match &c.out {
                Some(out) => out.clone(),
                None => c.config()?.output_dir,
            };
            print!("{}", collect_report(&root)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{line}");
            match err {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
