use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tilt::config::{preset, RunConfig};
use tilt::layout::save_dataset;
use tilt::train;

#[derive(Parser, Debug)]
#[command(name = "tilt", version, about = "Train, evaluate and probe a layout-aware document model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Span-corruption pretraining on an unlabelled JSONL corpus
    Pretrain(Common),
    /// Supervised training on annotated prompts
    Finetune(Common),
    /// Score a checkpoint on a dataset and print the report
    Eval(Common),
    /// Greedy answers for every prompt, one JSON line each
    Predict(Common),
    /// Write a synthetic dataset
    Synth(Common),
    /// Paired runs with and without spatial bias and vision
    Ablate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Finetuning hyperparameter preset, e.g. sroie-like
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplies steps and batch size
    #[arg(long)]
    scale: Option<f64>,
    /// Output path (checkpoint, report, predictions or dataset)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(name) = &self.preset {
            cfg.apply_preset(preset(name)?);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(f) = self.scale {
            cfg.scale(f)?;
        }
        if let Some(out) = &self.out {
            cfg.data.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn required_out(cfg: &RunConfig) -> Result<&Path> {
    match cfg.data.out.as_deref() {
        Some(p) => Ok(p),
        None => bail!("no output path: pass --out or set data.out"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = c.run_config()?;
            let out = required_out(&cfg)?.to_path_buf();
            let mut log = writer(cfg.data.log.as_deref())?;
            let run = train::cmd_pretrain(&cfg, &mut log)?;
            log.flush()?;
            run.checkpoint()?.save(&out)?;
        }
        Command::Finetune(c) => {
            let cfg = c.run_config()?;
            let out = required_out(&cfg)?.to_path_buf();
            let mut log = writer(cfg.data.log.as_deref())?;
            let run = train::cmd_finetune(&cfg, &mut log)?;
            log.flush()?;
            run.checkpoint()?.save(&out)?;
        }
        Command::Eval(c) => {
            let cfg = c.run_config()?;
            let report = train::cmd_eval(&cfg)?;
            let mut w = writer(cfg.data.out.as_deref())?;
            writeln!(w, "{}", report.to_json()?)?;
            w.flush()?;
        }
        Command::Predict(c) => {
            let cfg = c.run_config()?;
            let records = train::cmd_predict(&cfg)?;
            let mut w = writer(cfg.data.out.as_deref())?;
            for r in &records {
                let line = serde_json::json!({"id": r.id, "prompt": r.prompt, "prediction": r.prediction});
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        Command::Synth(c) => {
            let cfg = c.run_config()?;
            let docs = train::cmd_synth(&cfg)?;
            save_dataset(required_out(&cfg)?, &docs)?;
        }
        Command::Ablate(c) => {
            let cfg = c.run_config()?;
            let report = train::cmd_ablate(&cfg, &mut io::stderr())?;
            let mut w = writer(cfg.data.out.as_deref())?;
            writeln!(w, "{}", serde_json::to_string_pretty(&report)?)?;
            w.flush()?;
        }
    }
    Ok(())
}
