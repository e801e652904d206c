//! Episodic replay with return-weighted prioritized sampling.
//!
//! Episodes are stored whole, with frames quantized to 8 bits per channel.
//! Each sampled batch slot draws, with probability `alpha`, from the
//! positive-return episodes in proportion to their return; otherwise it
//! draws uniformly over all episodes. With no positive-return episode every
//! slot is uniform.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::Tensor;
use crate::world_model::{EpisodeBatch, NULL_ACTION};

pub const DEFAULT_CAPACITY: usize = 200_000;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// One real trajectory. Per-frame arrays have one entry per frame:
/// `actions[t]` and `rewards[t]` belong to the transition into frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub image_size: usize,
    /// `[frames, size, size, 3]`, 0–255.
    pub frames: Vec<u8>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
}

/// Map a `[0, 1]` intensity to its 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Episode {
    /// Start an episode from its reset frame.
    pub fn begin(image_size: usize, first_frame: &[f64]) -> Result<Self> {
        let mut ep =
            Self { image_size, frames: Vec::new(), actions: Vec::new(), rewards: Vec::new(), continues: Vec::new() };
        ep.push_frame(first_frame, NULL_ACTION, 0.0, true)?;
        Ok(ep)
    }

    /// Append the frame reached by `action`.
    pub fn push_frame(&mut self, frame: &[f64], action: usize, reward: f64, cont: bool) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(contract(format!("frame has {} values, expected {}", frame.len(), self.frame_len())));
        }
        self.frames.extend(frame.iter().map(|&v| quantize(v)));
        self.actions.push(action);
        self.rewards.push(reward);
        self.continues.push(if cont { 1.0 } else { 0.0 });
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn num_frames(&self) -> usize {
        self.actions.len()
    }

    /// Environment steps taken, one fewer than the frames.
    pub fn len(&self) -> usize {
        self.num_frames().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Frame `t` as `[size, size, 3]` in `[0, 1]`.
    pub fn frame(&self, t: usize) -> Tensor {
        let f = self.frame_len();
        let s = self.image_size;
        Tensor::new([s, s, 3], self.frames[t * f..(t + 1) * f].iter().map(|&v| v as f64 / 255.0).collect())
    }

    /// Frames `start..start + len` as `[len, size, size, 3]`.
    pub fn frames_tensor(&self, start: usize, len: usize) -> Tensor {
        let f = self.frame_len();
        let s = self.image_size;
        let data = self.frames[start * f..(start + len) * f].iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new([len, s, s, 3], data)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_frames();
        if n == 0 {
            return Err(contract("episode has no frames"));
        }
        if self.rewards.len() != n || self.continues.len() != n || self.frames.len() != n * self.frame_len() {
            return Err(contract(format!(
                "episode lengths disagree: {} actions, {} rewards, {} continues, {} frame bytes",
                n,
                self.rewards.len(),
                self.continues.len(),
                self.frames.len()
            )));
        }
        if self.actions[0] != NULL_ACTION || self.actions[1..].contains(&NULL_ACTION) {
            return Err(contract("only the first frame may carry the null action"));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(contract("episode rewards must be finite"));
        }
        if self.continues.iter().any(|&c| c != 0.0 && c != 1.0) {
            return Err(contract("continuation flags must be 0 or 1"));
        }
        Ok(())
    }

    /// This episode alone as a one-row batch.
    pub fn to_batch(&self) -> Result<EpisodeBatch> {
        batch_of(&[self])
    }
}

/// Pad `episodes` to the longest one and stack them.
pub fn batch_of(episodes: &[&Episode]) -> Result<EpisodeBatch> {
    let first = episodes.first().ok_or_else(|| contract("cannot batch zero episodes"))?;
    let s = first.image_size;
    if episodes.iter().any(|e| e.image_size != s) {
        return Err(contract("episodes in a batch must share an image size"));
    }
    let t_max = episodes.iter().map(|e| e.num_frames()).max().unwrap_or(0);
    let b = episodes.len();
    let f = first.frame_len();
    let mut images = vec![0.0; b * t_max * f];
    let mut actions = vec![NULL_ACTION; b * t_max];
    let mut rewards = vec![0.0; b * t_max];
    let mut continues = vec![0.0; b * t_max];
    let mut mask = vec![0.0; b * t_max];
    for (i, e) in episodes.iter().enumerate() {
        let n = e.num_frames();
        let off = i * t_max;
        for (dst, &v) in images[off * f..(off + n) * f].iter_mut().zip(&e.frames) {
            *dst = v as f64 / 255.0;
        }
        actions[off..off + n].copy_from_slice(&e.actions);
        rewards[off..off + n].copy_from_slice(&e.rewards);
        continues[off..off + n].copy_from_slice(&e.continues);
        mask[off..off + n].iter_mut().for_each(|m| *m = 1.0);
    }
    EpisodeBatch::new(Tensor::new([b, t_max, s, s, 3], images), actions, rewards, continues, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayConfig {
    /// Maximum stored environment steps.
    pub capacity: usize,
    /// Fraction of batch slots drawn from positive-return episodes.
    pub alpha: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: DEFAULT_CAPACITY, alpha: DEFAULT_ALPHA }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(contract("replay capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BufferStats {
    pub episodes: usize,
    pub steps: usize,
    pub nonzero_fraction: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug)]
struct Stored {
    episode: Episode,
    total_return: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryStore {
    config: ReplayConfig,
    episodes: VecDeque<Stored>,
    steps: usize,
    added: u64,
}

impl TrajectoryStore {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, episodes: VecDeque::new(), steps: 0, added: 0 })
    }

    pub fn config(&self) -> ReplayConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes ever added, including evicted ones.
    pub fn total_added(&self) -> u64 {
        self.added
    }

    /// Restore the lifetime counter after rebuilding a buffer from a checkpoint.
    pub fn set_total_added(&mut self, n: u64) {
        self.added = n;
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i].episode
    }

    pub fn cached_return(&self, i: usize) -> f64 {
        self.episodes[i].total_return
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|s| &s.episode)
    }

    /// Append `episode` and return whatever was evicted to make room, oldest first.
    pub fn add_episode(&mut self, episode: Episode) -> Result<Vec<Episode>> {
        episode.validate()?;
        if episode.len() > self.config.capacity {
            return Err(contract(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.config.capacity
            )));
        }
        self.steps += episode.len();
        let total_return = episode.total_return();
        self.episodes.push_back(Stored { episode, total_return });
        self.added += 1;
        let mut evicted = Vec::new();
        while self.steps > self.config.capacity {
            let old = self.episodes.pop_front().expect("over capacity implies an older episode");
            self.steps -= old.episode.len();
            evicted.push(old.episode);
        }
        Ok(evicted)
    }

    /// Sampling probabilities over the positive-return subset as (index, p).
    pub fn priority_probabilities(&self) -> Vec<(usize, f64)> {
        let positive: Vec<(usize, f64)> = self
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.total_return > 0.0)
            .map(|(i, s)| (i, s.total_return))
            .collect();
        let total: f64 = positive.iter().map(|p| p.1).sum();
        positive.into_iter().map(|(i, r)| (i, r / total)).collect()
    }

    /// Episode indices for `batch` slots.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.episodes.is_empty() {
            return Err(contract("cannot sample from an empty replay buffer"));
        }
        let prio = self.priority_probabilities();
        let weighted = if prio.is_empty() {
            None
        } else {
            let w = WeightedIndex::new(prio.iter().map(|p| p.1))
                .map_err(|e| contract(format!("priority weights rejected: {e}")))?;
            Some(w)
        };
        let n = self.episodes.len();
        Ok((0..batch)
            .map(|_| {
                let prioritized = rng.random::<f64>() < self.config.alpha;
                match (&weighted, prioritized) {
                    (Some(w), true) => prio[w.sample(rng)].0,
                    _ => rng.random_range(0..n),
                }
            })
            .collect())
    }

    pub fn sample_sequences(&self, batch: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
        let idx = self.sample_indices(batch, rng)?;
        let eps: Vec<&Episode> = idx.iter().map(|&i| &self.episodes[i].episode).collect();
        batch_of(&eps)
    }

    pub fn buffer_stats(&self) -> BufferStats {
        let n = self.episodes.len();
        if n == 0 {
            return BufferStats::default();
        }
        let nonzero = self.episodes.iter().filter(|s| s.total_return != 0.0).count();
        let sum: f64 = self.episodes.iter().map(|s| s.total_return).sum();
        BufferStats {
            episodes: n,
            steps: self.steps,
            nonzero_fraction: nonzero as f64 / n as f64,
            mean_return: sum / n as f64,
        }
    }
}

/// Store shared between one collecting writer and sampling readers.
#[derive(Clone, Debug)]
pub struct SharedStore(Arc<RwLock<TrajectoryStore>>);

impl SharedStore {
    pub fn new(store: TrajectoryStore) -> Self {
        Self(Arc::new(RwLock::new(store)))
    }

    pub fn add_episode(&self, episode: Episode) -> Result<Vec<Episode>> {
        self.0.write().unwrap_or_else(|e| e.into_inner()).add_episode(episode)
    }

    pub fn sample_sequences(&self, batch: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).sample_sequences(batch, rng)
    }

    pub fn buffer_stats(&self) -> BufferStats {
        self.0.read().unwrap_or_else(|e| e.into_inner()).buffer_stats()
    }

    /// Run `f` against a consistent snapshot.
    pub fn read<T>(&self, f: impl FnOnce(&TrajectoryStore) -> T) -> T {
        f(&self.0.read().unwrap_or_else(|e| e.into_inner()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(len: usize, reward_at: &[usize]) -> Episode {
        let mut e = Episode::begin(2, &[0.5; 12]).unwrap();
        for t in 1..=len {
            let r = if reward_at.contains(&t) { 3.0 } else { 0.0 };
            e.push_frame(&[t as f64 / len as f64; 12], t % 3, r, t < len).unwrap();
        }
        e
    }

    #[test]
    fn quantization_round_trips_levels() {
        for level in 0..=255u8 {
            assert_eq!(quantize(level as f64 / 255.0), level);
        }
    }

    #[test]
    fn malformed_episodes_are_rejected() {
        let mut store = TrajectoryStore::new(ReplayConfig::default()).unwrap();
        let mut e = episode(4, &[]);
        e.rewards.pop();
        assert!(store.add_episode(e).is_err());
        let mut e = episode(4, &[]);
        e.actions[2] = NULL_ACTION;
        assert!(store.add_episode(e).is_err());
        assert!(Episode::begin(2, &[0.0; 5]).is_err());
        let small = TrajectoryStore::new(ReplayConfig { capacity: 3, alpha: 0.0 });
        assert!(small.unwrap().add_episode(episode(4, &[])).is_err());
    }

    #[test]
    fn batches_pad_with_zero_mask() {
        let (a, b) = (episode(3, &[2]), episode(5, &[]));
        let batch = batch_of(&[&a, &b]).unwrap();
        assert_eq!((batch.batch, batch.steps), (2, 6));
        assert_eq!(batch.valid_len(0), 4);
        assert_eq!(batch.valid_len(1), 6);
        assert_eq!(&batch.rewards[..6], &[0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(batch.frames(0, 1, 1).data(), a.frame(1).data());
    }
}
