//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use tssm_core::graph::{Graph, Var};
use tssm_core::model::WorldModel;
use tssm_core::optim::{AdamW, AdamWConfig};
use tssm_core::rng::{RngStreams, StreamRng};
use tssm_core::world_model::{action_one_hot, EpisodeBatch, LatentPolicy, NULL_ACTION};
use tssm_core::Tensor;

pub fn rng(seed: u64, name: &str) -> StreamRng {
    RngStreams::new(seed).stream(name)
}

/// Batch of uniform-noise frames with random actions and rewards; row `b`
/// is valid for `lens[b]` steps and terminates at its last valid step.
pub fn random_batch(size: usize, t: usize, lens: &[usize], n_actions: usize, seed: u64) -> EpisodeBatch {
    let mut r = rng(seed, "batch");
    let b = lens.len();
    let images = Tensor::from_fn([b, t, size, size, 3], |_| r.random());
    let mut actions = Vec::with_capacity(b * t);
    let mut rewards = Vec::with_capacity(b * t);
    let mut continues = Vec::with_capacity(b * t);
    let mut mask = Vec::with_capacity(b * t);
    for &len in lens {
        for step in 0..t {
            actions.push(if step == 0 { NULL_ACTION } else { r.random_range(0..n_actions) });
            rewards.push(if r.random::<f64>() < 0.3 { 3.0 } else { 0.0 });
            continues.push(if step + 1 == len { 0.0 } else { 1.0 });
            mask.push(if step < len { 1.0 } else { 0.0 });
        }
    }
    EpisodeBatch::new(images, actions, rewards, continues, mask).unwrap()
}

/// A block that moves left or right with the action over a plain
/// background; reward 3 whenever it sits in the rightmost column.
pub fn block_world(size: usize, t: usize, n: usize, seed: u64) -> EpisodeBatch {
    let mut r = rng(seed, "block");
    let frame = size * size * 3;
    let mut images = vec![0.0; n * t * frame];
    let (mut actions, mut rewards, mut continues, mut mask) = (vec![], vec![], vec![], vec![]);
    let cell = size / 4;
    for b in 0..n {
        let mut col: usize = r.random_range(0..4);
        for step in 0..t {
            let a = if step == 0 { NULL_ACTION } else { r.random_range(0..3) };
            if step > 0 {
                match a {
                    0 => col = col.saturating_sub(1),
                    1 => col = (col + 1).min(3),
                    _ => {}
                }
            }
            let img = &mut images[(b * t + step) * frame..(b * t + step + 1) * frame];
            for y in 0..size {
                for x in 0..size {
                    let inside = x / cell == col && y >= size / 4 && y < size / 2;
                    let px = if inside { [0.9, 0.2, 0.1] } else { [0.3, 0.35, 0.3] };
                    img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&px);
                }
            }
            actions.push(a);
            rewards.push(if col == 3 { 3.0 } else { 0.0 });
            continues.push(if step + 1 == t { 0.0 } else { 1.0 });
            mask.push(1.0);
        }
    }
    EpisodeBatch::new(Tensor::new([n, t, size, size, 3], images), actions, rewards, continues, mask).unwrap()
}

/// Run `steps` optimizer updates on `batch`; returns the loss before each update.
pub fn train(model: &mut WorldModel, batch: &EpisodeBatch, steps: usize, lr: f64, seed: u64) -> Vec<f64> {
    let mut opt = AdamW::new(AdamWConfig::with_lr(lr), model.params());
    let mut r = rng(seed, "train");
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (l, grads) = model.loss_and_grads(batch, &mut r).unwrap();
        losses.push(l.total);
        opt.step(model.params_mut(), grads).unwrap();
    }
    losses
}

/// Plays a fixed action list during imagination.
pub struct ScriptedPolicy {
    pub actions: Vec<usize>,
    pub n_actions: usize,
    pub next: usize,
}

impl LatentPolicy for ScriptedPolicy {
    fn act(&mut self, g: &mut Graph, _features: Var, _rng: &mut StreamRng) -> tssm_core::Result<Var> {
        let a = self.actions[self.next % self.actions.len()];
        self.next += 1;
        Ok(g.constant(action_one_hot(&[a], self.n_actions)))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
