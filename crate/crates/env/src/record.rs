//! Compact episode records: the seed and the action, reward and done flag of
//! every step. Images are regenerated by replaying the actions.
//!
//! Each record is `"HOEP"`, a `u32` version, the `u64` config hash, the `u64`
//! seed and a `u32` step count, followed by `(u8 action, f32 reward, u8 done)`
//! per step, all little-endian. Files hold records back to back.

use std::io::{ErrorKind, Read, Write};

use crate::config::GridConfig;
use crate::env::{Action, EnvState, HiddenOrderEnv};
use crate::error::{Error, Result};
use crate::render::Observation;

pub const RECORD_MAGIC: [u8; 4] = *b"HOEP";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub action: u8,
    pub reward: f32,
    pub done: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub config_hash: u64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn new(config: &GridConfig, seed: u64) -> Self {
        Self { config_hash: config.config_hash(), seed, steps: Vec::new() }
    }

    pub fn push(&mut self, action: Action, reward: f64, done: bool) {
        self.steps.push(StepRecord { action: action.index() as u8, reward: reward as f32, done: done as u8 });
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward as f64).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done == 1)
    }
}

pub fn write_records(mut w: impl Write, records: &[EpisodeRecord]) -> Result<()> {
    for r in records {
        w.write_all(&RECORD_MAGIC)?;
        w.write_all(&RECORD_VERSION.to_le_bytes())?;
        w.write_all(&r.config_hash.to_le_bytes())?;
        w.write_all(&r.seed.to_le_bytes())?;
        let n = u32::try_from(r.steps.len()).map_err(|_| Error::Format("episode too long".into()))?;
        w.write_all(&n.to_le_bytes())?;
        for s in &r.steps {
            w.write_all(&[s.action])?;
            w.write_all(&s.reward.to_le_bytes())?;
            w.write_all(&[s.done])?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format("truncated episode record".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

/// Read records until end of input.
pub fn read_records(mut r: impl Read) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    loop {
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut magic[got..])? {
                0 if got == 0 => return Ok(out),
                0 => return Err(Error::Format("truncated episode record".into())),
                n => got += n,
            }
        }
        if magic != RECORD_MAGIC {
            return Err(Error::Format(format!("bad record magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_exact(&mut r)?);
        if version != RECORD_VERSION {
            return Err(Error::Format(format!("record version {version}, expected {RECORD_VERSION}")));
        }
        let config_hash = u64::from_le_bytes(read_exact(&mut r)?);
        let seed = u64::from_le_bytes(read_exact(&mut r)?);
        let n = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut steps = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let [action] = read_exact::<1>(&mut r)?;
            let reward = f32::from_le_bytes(read_exact(&mut r)?);
            let [done] = read_exact::<1>(&mut r)?;
            if action as usize >= Action::COUNT || done > 1 {
                return Err(Error::Format(format!("invalid step (action {action}, done {done})")));
            }
            steps.push(StepRecord { action, reward, done });
        }
        out.push(EpisodeRecord { config_hash, seed, steps });
    }
}

/// Everything a replay reconstructs: one observation and state per frame
/// (reset frame first) and the number of order completions.
#[derive(Clone, Debug)]
pub struct Replayed {
    pub observations: Vec<Observation>,
    pub states: Vec<EnvState>,
}

/// Re-run `record` in a fresh environment, checking every reward and done flag.
pub fn replay_record(config: &GridConfig, record: &EpisodeRecord) -> Result<Replayed> {
    if record.config_hash != config.config_hash() {
        return Err(Error::Contract("episode record was made with a different grid configuration".into()));
    }
    let mut env = HiddenOrderEnv::new(config.clone())?;
    let mut observations = vec![env.reset(record.seed)?];
    let mut states = vec![env.state()?.clone()];
    for (t, s) in record.steps.iter().enumerate() {
        let out = env.step(Action::from_index(s.action as usize)?)?;
        if (out.reward as f32).to_bits() != s.reward.to_bits() || out.done != (s.done == 1) {
            return Err(Error::Contract(format!("replay diverged from the record at step {t}")));
        }
        observations.push(out.obs);
        states.push(env.state()?.clone());
    }
    Ok(Replayed { observations, states })
}

/// Whether the full hidden order was completed at least once.
pub fn episode_success(config: &GridConfig, record: &EpisodeRecord) -> Result<bool> {
    let r = replay_record(config, record)?;
    Ok(r.states.last().is_some_and(|s| s.completions > 0))
}
