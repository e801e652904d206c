//! `holab`: train, evaluate and report on world-model agents.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use hidden_order::{read_records, write_records};
use lab::config::RunConfig;
use lab::eval::{
    emit_report, evaluate_agent, file_hash, generation_report, scripted_eval_episodes, EvalEpisode, EvalReport,
    Provenance,
};
use lab::trainer::{load_models, Trainer};
use tssm_core::world_model::ModelKind;

/// Env seeds for evaluation start far from anything the training streams produce by index.
const DEFAULT_EVAL_SEED: u64 = 1_000_000_007;

#[derive(Parser)]
#[command(name = "holab", version, about = "World-model agents on the hidden-order grid task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a world model and agent.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        logdir: PathBuf,
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
        /// Total environment steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Play the trained agent and report returns and success rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
        seed: u64,
        /// Exit nonzero when the success rate (percent) is below this.
        #[arg(long)]
        min_success: Option<f64>,
    },
    /// Open-loop generation errors, reward accuracy and image strips.
    GenReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "60,70,80")]
        contexts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
        seed: u64,
        /// Evaluate on these recorded episodes instead of scripted ones.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Image strips per context.
        #[arg(long, default_value_t = 2)]
        strips: usize,
        /// Exit nonzero when any overall MSE exceeds this.
        #[arg(long)]
        max_mse: Option<f64>,
    },
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("expected tssm or rssm, got {s:?}"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, logdir, model, steps, resume } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            cfg.seed = seed;
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(n) = steps {
                cfg.total_steps = n;
            }
            std::fs::create_dir_all(&logdir)?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt, &logdir)?,
                None => Trainer::new(cfg, &logdir)?,
            };
            std::fs::write(logdir.join("config.cfg"), trainer.config.to_text())?;
            let path = trainer.run()?;
            println!("{} env steps, {} episodes; checkpoint {}", trainer.env_steps, trainer.episodes, path.display());
        }
        Command::Eval { checkpoint, episodes, out, seed, min_success } => {
            let (cfg, wm, agent, _) = load_models(&checkpoint)?;
            let (row, records) = evaluate_agent(&cfg.grid(), &wm, &agent, episodes, seed)?;
            std::fs::create_dir_all(&out)?;
            write_records(BufWriter::new(File::create(out.join("episodes.hoep"))?), &records)?;
            let success = row.success_pct;
            let report = EvalReport {
                context_rows: Vec::new(),
                agent_rows: vec![row],
                provenance: Provenance { checkpoint_hash: file_hash(&checkpoint)?, seed, episodes },
            };
            emit_report(&report, &[], &out)?;
            print!("{}", report.summary());
            if let Some(min) = min_success {
                if success < min {
                    bail!("success rate {success:.1}% is below {min}%");
                }
            }
        }
        Command::GenReport { checkpoint, contexts, out, episodes, seed, records, strips, max_mse } => {
            let (cfg, wm, _, _) = load_models(&checkpoint)?;
            let grid = cfg.grid();
            let eps: Vec<EvalEpisode> = match records {
                Some(path) => read_records(BufReader::new(File::open(&path)?))?
                    .into_iter()
                    .take(episodes)
                    .map(|r| EvalEpisode::from_record(&grid, r))
                    .collect::<lab::Result<_>>()?,
                None => scripted_eval_episodes(&grid, episodes, seed)?,
            };
            let (rows, strip_list) = generation_report(&wm, &eps, &contexts, seed, strips)?;
            let report = EvalReport {
                context_rows: rows,
                agent_rows: Vec::new(),
                provenance: Provenance { checkpoint_hash: file_hash(&checkpoint)?, seed, episodes: eps.len() },
            };
            emit_report(&report, &strip_list, &out)?;
            print!("{}", report.summary());
            if let Some(max) = max_mse {
                if let Some(r) = report.context_rows.iter().find(|r| r.overall_mse > max) {
                    bail!("context {} has MSE {:.2} above {max}", r.context, r.overall_mse);
                }
            }
        }
    }
    Ok(())
}
