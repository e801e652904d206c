//! Training metrics as CSV, one row per update or finished episode.

use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use crate::error::Result;

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "phase",
    "loss_total",
    "loss_image",
    "loss_reward",
    "loss_discount",
    "kl",
    "actor_loss",
    "critic_loss",
    "policy_entropy",
    "episode_return",
    "episodes",
    "wallclock_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Collect,
    WorldModel,
    Agent,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Collect => "collect",
            Phase::WorldModel => "world_model",
            Phase::Agent => "agent",
        }
    }
}

/// Columns that do not apply to a phase stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub loss_total: Option<f64>,
    pub loss_image: Option<f64>,
    pub loss_reward: Option<f64>,
    pub loss_discount: Option<f64>,
    pub kl: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub episode_return: Option<f64>,
    pub episodes: u64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn new(step: u64, phase: Phase, episodes: u64, wallclock_s: f64) -> Self {
        Self {
            step,
            phase,
            loss_total: None,
            loss_image: None,
            loss_reward: None,
            loss_discount: None,
            kl: None,
            actor_loss: None,
            critic_loss: None,
            policy_entropy: None,
            episode_return: None,
            episodes,
            wallclock_s,
        }
    }

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.step.to_string(),
            self.phase.as_str().to_string(),
            opt(self.loss_total),
            opt(self.loss_image),
            opt(self.loss_reward),
            opt(self.loss_discount),
            opt(self.kl),
            opt(self.actor_loss),
            opt(self.critic_loss),
            opt(self.policy_entropy),
            opt(self.episode_return),
            self.episodes.to_string(),
            format!("{:.3}", self.wallclock_s),
        ]
    }
}

pub struct MetricsWriter {
    out: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    /// Start a fresh file with a header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        out.write_record(METRICS_COLUMNS)?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Continue an existing file, writing a header only if it is empty or missing.
    pub fn append(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        if fresh {
            out.write_record(METRICS_COLUMNS)?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.out.write_record(row.fields())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics file into header and rows of raw fields.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(String::from).collect())).collect::<Result<_, _>>()?;
    Ok((header, rows))
}
