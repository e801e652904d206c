//! The training loop: prefill, then cycles of collection, world-model
//! updates and agent updates, with checkpoints and a metrics log.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hidden_order::{run_episode, write_records, EpisodeRecord, RandomPolicy, StepRecord};
use rand::{Rng, RngCore};
use tssm_core::agent::{ActMode, Agent, AgentStats};
use tssm_core::checkpoint::{
    agent_section, restore_agent, restore_world_model, world_model_section, Checkpoint, Section,
};
use tssm_core::model::WorldModel;
use tssm_core::optim::{AdamW, AdamWConfig};
use tssm_core::replay::{batch_of, Episode, TrajectoryStore};
use tssm_core::rng::{RngState, RngStreams, StreamRng};
use tssm_core::world_model::{Context, LossBreakdown, WorldModelState};
use tssm_core::Tensor;

use crate::config::{Horizon, RunConfig};
use crate::data::{episode_from_record, AgentPolicy};
use crate::error::{LabError, Result};
use crate::metrics::{MetricsRow, MetricsWriter, Phase};

pub const TRAINER_KIND: &str = "trainer";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.tdrm";
pub const EVICTED_FILE: &str = "evicted.hoep";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

const STREAMS: [&str; 5] = ["collect/action", "collect/filter", "world_model", "agent", "replay"];

/// Independent random streams of the loop, so that checkpointing each
/// position is enough to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainerRngs {
    pub collect_action: StreamRng,
    pub collect_filter: StreamRng,
    pub world_model: StreamRng,
    pub agent: StreamRng,
    pub replay: StreamRng,
}

impl TrainerRngs {
    fn new(streams: &RngStreams) -> Self {
        Self {
            collect_action: streams.stream(STREAMS[0]),
            collect_filter: streams.stream(STREAMS[1]),
            world_model: streams.stream(STREAMS[2]),
            agent: streams.stream(STREAMS[3]),
            replay: streams.stream(STREAMS[4]),
        }
    }

    fn all(&self) -> [&StreamRng; 5] {
        [&self.collect_action, &self.collect_filter, &self.world_model, &self.agent, &self.replay]
    }

    fn all_mut(&mut self) -> [&mut StreamRng; 5] {
        [&mut self.collect_action, &mut self.collect_filter, &mut self.world_model, &mut self.agent, &mut self.replay]
    }
}

/// One finished real episode.
#[derive(Clone, Debug)]
pub struct CollectedEpisode {
    pub record: EpisodeRecord,
    pub episode: Episode,
    /// States the agent filtered online while acting; empty for random play.
    pub online_states: Vec<WorldModelState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collector {
    Random,
    Agent,
}

pub struct Trainer {
    pub config: RunConfig,
    pub world_model: WorldModel,
    pub wm_opt: AdamW,
    pub agent: Agent,
    pub replay: TrajectoryStore,
    /// Mirrors `replay` so that the buffer can be checkpointed as records.
    records: VecDeque<EpisodeRecord>,
    pub rngs: TrainerRngs,
    streams: RngStreams,
    pub env_steps: u64,
    pub episodes: u64,
    pub wm_updates: u64,
    logdir: PathBuf,
    metrics: MetricsWriter,
    clock: Instant,
    clock_offset: f64,
}

impl Trainer {
    /// Fresh run writing into `logdir`.
    pub fn new(config: RunConfig, logdir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(logdir)?;
        let metrics = MetricsWriter::create(&logdir.join(METRICS_FILE))?;
        Self::build(config, logdir, metrics)
    }

    fn build(config: RunConfig, logdir: &Path, metrics: MetricsWriter) -> Result<Self> {
        let streams = RngStreams::new(config.seed);
        let world_model = config.build_world_model(&mut streams.stream("init/world_model"))?;
        let wm_opt = AdamW::new(
            AdamWConfig {
                clip: Some(config.grad_clip),
                weight_decay: config.weight_decay,
                ..AdamWConfig::with_lr(config.wm_lr)
            },
            world_model.params(),
        );
        let agent = Agent::new(
            config.agent(),
            world_model.feature_dim(),
            hidden_order::Action::COUNT,
            &mut streams.stream("init/agent"),
        )?;
        Ok(Self {
            replay: TrajectoryStore::new(config.replay())?,
            records: VecDeque::new(),
            rngs: TrainerRngs::new(&streams),
            streams,
            world_model,
            wm_opt,
            agent,
            env_steps: 0,
            episodes: 0,
            wm_updates: 0,
            logdir: logdir.to_path_buf(),
            metrics,
            clock: Instant::now(),
            clock_offset: 0.0,
            config,
        })
    }

    pub fn logdir(&self) -> &Path {
        &self.logdir
    }

    fn wallclock(&self) -> f64 {
        if self.config.record_wallclock {
            self.clock_offset + self.clock.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn row(&self, phase: Phase) -> MetricsRow {
        MetricsRow::new(self.env_steps, phase, self.episodes, self.wallclock())
    }

    /// Environment seed of the `index`-th training episode.
    pub fn episode_seed(&self, index: u64) -> u64 {
        self.streams.indexed("env", index).next_u64()
    }

    /// Play whole episodes until at least `n_steps` steps were taken, and
    /// add them to replay.
    pub fn collect_experience(&mut self, collector: Collector, n_steps: usize) -> Result<Vec<CollectedEpisode>> {
        let grid = self.config.grid();
        let mut out = Vec::new();
        let mut taken = 0;
        while taken < n_steps.max(1) {
            let seed = self.episode_seed(self.episodes);
            let (record, online_states) = match collector {
                Collector::Random => {
                    let mut p = RandomPolicy::new(self.rngs.collect_action.next_u64());
                    (run_episode(&grid, seed, &mut p)?, Vec::new())
                }
                Collector::Agent => {
                    let mut p = AgentPolicy::new(
                        &self.world_model,
                        &self.agent,
                        ActMode::Explore,
                        &mut self.rngs.collect_filter,
                        &mut self.rngs.collect_action,
                    );
                    let rec = run_episode(&grid, seed, &mut p)?;
                    (rec, std::mem::take(&mut p.states))
                }
            };
            let (episode, _) = episode_from_record(&grid, &record)?;
            let len = record.steps.len();
            if collector == Collector::Agent {
                self.agent.set_epsilon_calls(self.agent.epsilon_calls() + len as u64);
            }
            self.store(record.clone(), episode.clone())?;
            taken += len;
            self.env_steps += len as u64;
            self.episodes += 1;
            let mut row = self.row(if collector == Collector::Random { Phase::Prefill } else { Phase::Collect });
            row.episode_return = Some(record.total_reward());
            self.metrics.write(&row)?;
            out.push(CollectedEpisode { record, episode, online_states });
        }
        self.metrics.flush()?;
        Ok(out)
    }

    fn store(&mut self, record: EpisodeRecord, episode: Episode) -> Result<()> {
        let evicted = self.replay.add_episode(episode)?;
        self.records.push_back(record);
        if !evicted.is_empty() {
            let gone: Vec<EpisodeRecord> = self.records.drain(..evicted.len()).collect();
            let file = OpenOptions::new().create(true).append(true).open(self.logdir.join(EVICTED_FILE))?;
            write_records(std::io::BufWriter::new(file), &gone)?;
        }
        Ok(())
    }

    /// One world-model step on a sampled batch.
    pub fn world_model_update(&mut self) -> Result<LossBreakdown> {
        let batch_rng = RngState::capture(&self.rngs.replay);
        let idx = self.replay.sample_indices(self.config.batch_size, &mut self.rngs.replay)?;
        let eps: Vec<&Episode> = idx.iter().map(|&i| self.replay.episode(i)).collect();
        let batch = batch_of(&eps)?;
        let loss_rng = RngState::capture(&self.rngs.world_model);
        let result = self.world_model.loss_and_grads(&batch, &mut self.rngs.world_model);
        let (loss, grads) = match result {
            Ok((l, g)) if g.iter().all(Tensor::is_finite) => (l, g),
            Ok((l, _)) => {
                return Err(self.diverged(&format!("non-finite gradients at loss {l:?}"), &idx, batch_rng, loss_rng))
            }
            Err(tssm_core::Error::NumericDomain(msg)) => return Err(self.diverged(&msg, &idx, batch_rng, loss_rng)),
            Err(e) => return Err(e.into()),
        };
        self.wm_opt.step(self.world_model.params_mut(), grads)?;
        self.wm_updates += 1;
        let mut row = self.row(Phase::WorldModel);
        row.loss_total = Some(loss.total);
        row.loss_image = Some(loss.image);
        row.loss_reward = Some(loss.reward);
        row.loss_discount = Some(loss.discount);
        row.kl = Some(loss.kl);
        self.metrics.write(&row)?;
        Ok(loss)
    }

    /// Write the offending batch's provenance next to the metrics.
    fn diverged(&mut self, msg: &str, idx: &[usize], batch_rng: RngState, loss_rng: RngState) -> LabError {
        let path = self.logdir.join(NAN_DUMP_FILE);
        let mut text = format!(
            "world-model update {} at env step {}: {msg}\nseed = {}\nreplay_rng = {:?}\nloss_rng = {:?}\n",
            self.wm_updates,
            self.env_steps,
            self.config.seed,
            batch_rng.to_words(),
            loss_rng.to_words()
        );
        for &i in idx {
            let r = &self.records[i];
            text.push_str(&format!("episode slot {i}: env seed {} return {}\n", r.seed, r.total_reward()));
        }
        let _ = self.metrics.flush();
        match std::fs::write(&path, text) {
            Ok(()) => LabError::Diverged(format!("{msg}; batch written to {}", path.display())),
            Err(e) => LabError::Diverged(format!("{msg}; writing {} failed: {e}", path.display())),
        }
    }

    /// One agent step on imagination started from posterior states of a fresh batch.
    pub fn agent_update(&mut self) -> Result<AgentStats> {
        let idx = self.replay.sample_indices(self.config.agent_batch_size, &mut self.rngs.replay)?;
        let eps: Vec<&Episode> = idx.iter().map(|&i| self.replay.episode(i)).collect();
        let batch = batch_of(&eps)?;
        self.world_model.params_mut().set_frozen(true);
        let stats = self.imagine_and_update(&batch);
        self.world_model.params_mut().set_frozen(false);
        let stats = stats?;
        let mut row = self.row(Phase::Agent);
        row.actor_loss = Some(stats.actor_loss);
        row.critic_loss = Some(stats.critic_loss);
        row.policy_entropy = Some(stats.entropy);
        self.metrics.write(&row)?;
        Ok(stats)
    }

    fn imagine_and_update(&mut self, batch: &tssm_core::world_model::EpisodeBatch) -> Result<AgentStats> {
        let rng = &mut self.rngs.agent;
        let states = self.world_model.observe_filter(batch, rng)?;
        let candidates: Vec<(usize, usize)> =
            (0..batch.batch).flat_map(|b| (0..batch.valid_len(b).saturating_sub(1)).map(move |t| (b, t))).collect();
        if candidates.is_empty() {
            return Err(LabError::InvalidConfig("sampled episodes are too short to imagine from".into()));
        }
        let starts: Vec<(Context, usize)> = (0..self.config.start_states)
            .map(|_| {
                let (b, t) = candidates[rng.random_range(0..candidates.len())];
                let len = batch.valid_len(b);
                let actions = &batch.actions[b * batch.steps..b * batch.steps + len];
                let horizon = match self.config.horizon {
                    Horizon::ToEnd => len - 1 - t,
                    Horizon::Fixed(n) => n,
                };
                (Context::from_states(&states[b], actions, t), horizon)
            })
            .collect();
        Ok(self.agent.update(&self.world_model, &starts, rng)?)
    }

    /// Collection, then world-model updates, then agent updates.
    pub fn cycle(&mut self) -> Result<()> {
        self.collect_experience(Collector::Agent, self.config.steps_per_cycle)?;
        for _ in 0..self.config.wm_updates {
            self.world_model_update()?;
        }
        for _ in 0..self.config.agent_updates {
            self.agent_update()?;
        }
        self.metrics.flush()
    }

    /// Run to `total_steps`, checkpointing on schedule; returns the final checkpoint path.
    pub fn run(&mut self) -> Result<PathBuf> {
        if self.env_steps == 0 {
            self.collect_experience(Collector::Random, self.config.prefill_steps)?;
        }
        let every = self.config.checkpoint_every as u64;
        while self.env_steps < self.config.total_steps as u64 {
            let before = self.env_steps;
            self.cycle()?;
            if every > 0 && before / every != self.env_steps / every {
                self.save_checkpoint(&self.logdir.join(format!("step_{:09}.tdrm", self.env_steps)))?;
            }
        }
        let path = self.logdir.join(FINAL_CHECKPOINT);
        self.save_checkpoint(&path)?;
        Ok(path)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.config_hash());
        c.meta.push(("config".into(), self.config.to_text()));
        c.sections.push(world_model_section(&self.world_model, Some(&self.wm_opt)));
        c.sections.push(agent_section(&self.agent));
        let mut t = Section::new(TRAINER_KIND);
        t.put_u64("counters", &[self.env_steps, self.episodes, self.wm_updates, self.replay.total_added()]);
        let words: Vec<u64> = self.rngs.all().iter().flat_map(|r| RngState::capture(r).to_words()).collect();
        t.put_u64("rng_states", &words);
        t.put_tensor("wallclock_s", &Tensor::scalar(self.wallclock()));
        t.put_u64("replay/seeds", &self.records.iter().map(|r| r.seed).collect::<Vec<_>>());
        t.put_u64("replay/lengths", &self.records.iter().map(|r| r.steps.len() as u64).collect::<Vec<_>>());
        let steps: Vec<&StepRecord> = self.records.iter().flat_map(|r| &r.steps).collect();
        t.put_u64("replay/actions", &steps.iter().map(|s| s.action as u64).collect::<Vec<_>>());
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward as f64).collect();
        t.put_tensor("replay/rewards", &Tensor::new([rewards.len()], rewards));
        c.sections.push(t);
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Continue a run from `path`, appending to the metrics in `logdir`.
    /// `config` must match the checkpoint's except for the run-extent keys;
    /// the seed always comes from the checkpoint.
    pub fn resume(mut config: RunConfig, path: &Path, logdir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if let Some(text) = ckpt.meta("config") {
            config.seed = RunConfig::parse(text)?.seed;
        }
        config.validate()?;
        ckpt.expect_config(config.config_hash())?;
        std::fs::create_dir_all(logdir)?;
        let metrics = MetricsWriter::append(&logdir.join(METRICS_FILE))?;
        let mut tr = Self::build(config, logdir, metrics)?;
        restore_world_model(&ckpt, &mut tr.world_model, Some(&mut tr.wm_opt))?;
        restore_agent(&ckpt, &mut tr.agent)?;
        let t = ckpt.section(TRAINER_KIND)?;
        let incompatible = |m: &str| LabError::Core(tssm_core::Error::Incompatible(m.into()));
        let [env_steps, episodes, wm_updates, total_added] = *t.u64s("counters")? else {
            return Err(incompatible("trainer counters must hold 4 values"));
        };
        let words = t.u64s("rng_states")?;
        if words.len() != 7 * STREAMS.len() {
            return Err(incompatible("trainer rng states have the wrong length"));
        }
        for (rng, w) in tr.rngs.all_mut().into_iter().zip(words.chunks(7)) {
            *rng = RngState::from_words(w).ok_or_else(|| incompatible("bad rng state"))?.restore();
        }
        tr.clock_offset = t.tensor("wallclock_s")?.item();
        let grid = tr.config.grid();
        let (seeds, lengths, actions) = (t.u64s("replay/seeds")?, t.u64s("replay/lengths")?, t.u64s("replay/actions")?);
        let rewards = t.tensor("replay/rewards")?;
        if seeds.len() != lengths.len() || actions.len() != rewards.numel() {
            return Err(incompatible("replay arrays disagree"));
        }
        let mut pos = 0;
        let mut restored = TrajectoryStore::new(tr.config.replay())?;
        for (&seed, &len) in seeds.iter().zip(lengths) {
            let len = len as usize;
            if pos + len > actions.len() {
                return Err(incompatible("replay arrays disagree"));
            }
            let mut rec = EpisodeRecord { config_hash: grid.config_hash(), seed, steps: Vec::with_capacity(len) };
            for k in pos..pos + len {
                let done = (k + 1 == pos + len) as u8;
                rec.steps.push(StepRecord { action: actions[k] as u8, reward: rewards.data()[k] as f32, done });
            }
            pos += len;
            let (ep, _) = episode_from_record(&grid, &rec)?;
            restored.add_episode(ep)?;
            tr.records.push_back(rec);
        }
        restored.set_total_added(total_added);
        tr.replay = restored;
        tr.env_steps = env_steps;
        tr.episodes = episodes;
        tr.wm_updates = wm_updates;
        Ok(tr)
    }
}

/// Rebuild the config, world model and agent stored in a checkpoint.
pub fn load_models(path: &Path) -> Result<(RunConfig, WorldModel, Agent, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let text = ckpt
        .meta("config")
        .ok_or_else(|| LabError::Core(tssm_core::Error::Incompatible("checkpoint carries no run config".into())))?;
    let config = RunConfig::parse(text)?;
    ckpt.expect_config(config.config_hash())?;
    let streams = RngStreams::new(config.seed);
    let mut wm = config.build_world_model(&mut streams.stream("init/world_model"))?;
    restore_world_model(&ckpt, &mut wm, None)?;
    let mut agent =
        Agent::new(config.agent(), wm.feature_dim(), hidden_order::Action::COUNT, &mut streams.stream("init/agent"))?;
    restore_agent(&ckpt, &mut agent)?;
    Ok((config, wm, agent, ckpt))
}
