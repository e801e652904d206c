use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GridConfig;
use crate::env::{Action, Dir, EnvState, HiddenOrderEnv};
use crate::error::Result;
use crate::record::EpisodeRecord;

/// Chooses actions from the environment. Learned policies see only observations;
/// the scripted collector reads the hidden state.
pub trait Policy {
    fn act(&mut self, env: &HiddenOrderEnv) -> Result<Action>;
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _env: &HiddenOrderEnv) -> Result<Action> {
        Ok(Action::ALL[self.rng.random_range(0..Action::COUNT)])
    }
}

/// Walks a shortest path to the next ball of the hidden order, steering
/// around the other balls.
#[derive(Default)]
pub struct ScriptedCollector;

impl ScriptedCollector {
    fn plan(cfg: &GridConfig, s: &EnvState, avoid_balls: bool) -> Option<Action> {
        step_towards(cfg, s, s.ball_home[s.hidden_order[s.progress]], avoid_balls)
    }
}

/// First action of a shortest turn-and-move path that enters `target`,
/// optionally treating every other present ball as an obstacle.
pub fn step_towards(cfg: &GridConfig, s: &EnvState, target: (usize, usize), avoid_balls: bool) -> Option<Action> {
    let blocked = |cell: (usize, usize)| {
        cfg.is_wall(cell.0 as isize, cell.1 as isize) || (avoid_balls && cell != target && s.ball_at(cell).is_some())
    };
    let start = (s.agent_pos, s.agent_dir);
    let mut first: HashMap<((usize, usize), Dir), Action> = HashMap::new();
    let mut queue = VecDeque::from([start]);
    let mut seen = vec![start];
    while let Some((pos, dir)) = queue.pop_front() {
        for a in Action::ALL {
            let next = match a {
                Action::TurnLeft => (pos, dir.left()),
                Action::TurnRight => (pos, dir.right()),
                Action::Forward => {
                    let (dr, dc) = dir.delta();
                    let cell = ((pos.0 as isize + dr) as usize, (pos.1 as isize + dc) as usize);
                    if blocked(cell) {
                        continue;
                    }
                    (cell, dir)
                }
            };
            let via = if (pos, dir) == start { a } else { first[&(pos, dir)] };
            if a == Action::Forward && next.0 == target {
                return Some(via);
            }
            if !seen.contains(&next) {
                seen.push(next);
                first.insert(next, via);
                queue.push_back(next);
            }
        }
    }
    None
}

impl Policy for ScriptedCollector {
    fn act(&mut self, env: &HiddenOrderEnv) -> Result<Action> {
        let s = env.state()?;
        let cfg = env.config();
        Ok(Self::plan(cfg, s, true).or_else(|| Self::plan(cfg, s, false)).unwrap_or(Action::TurnLeft))
    }
}

/// Play one full episode from `seed`.
pub fn run_episode(config: &GridConfig, seed: u64, policy: &mut dyn Policy) -> Result<EpisodeRecord> {
    let mut env = HiddenOrderEnv::new(config.clone())?;
    env.reset(seed)?;
    let mut rec = EpisodeRecord::new(config, seed);
    loop {
        let a = policy.act(&env)?;
        let out = env.step(a)?;
        rec.push(a, out.reward, out.done);
        if out.done {
            return Ok(rec);
        }
    }
}

pub fn scripted_episode(config: &GridConfig, seed: u64) -> Result<EpisodeRecord> {
    run_episode(config, seed, &mut ScriptedCollector)
}

pub fn random_episode(config: &GridConfig, seed: u64, policy_seed: u64) -> Result<EpisodeRecord> {
    run_episode(config, seed, &mut RandomPolicy::new(policy_seed))
}
