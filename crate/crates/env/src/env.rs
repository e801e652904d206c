use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{manhattan, GridConfig};
use crate::error::{Error, Result};
use crate::render::{render_obs, Observation};

pub const BALL_REWARD: f64 = 3.0;
const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    /// (row, col) step.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::N => (-1, 0),
            Dir::E => (0, 1),
            Dir::S => (1, 0),
            Dir::W => (0, -1),
        }
    }

    pub fn left(self) -> Dir {
        match self {
            Dir::N => Dir::W,
            Dir::W => Dir::S,
            Dir::S => Dir::E,
            Dir::E => Dir::N,
        }
    }

    pub fn right(self) -> Dir {
        self.left().left().left()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::Forward];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL.get(i).copied().ok_or_else(|| Error::Contract(format!("action index {i} out of range")))
    }
}

/// What a step did besides moving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    None,
    Blocked,
    /// The next ball in the order; `paid` is whether it earned the reward.
    Collected {
        ball: usize,
        paid: bool,
    },
    /// A ball out of order; every ball was restored.
    WrongBall {
        ball: usize,
    },
    /// The last ball of the order; a new reward cycle begins.
    Completed {
        ball: usize,
        paid: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: (usize, usize),
    pub agent_dir: Dir,
    pub ball_home: Vec<(usize, usize)>,
    pub ball_present: Vec<bool>,
    /// `hidden_order[k]` is the ball to collect `k`-th.
    pub hidden_order: Vec<usize>,
    pub progress: usize,
    /// Balls already paid in the current reward cycle.
    pub rewarded: Vec<bool>,
    pub step_count: usize,
    /// Times the full order was completed this episode.
    pub completions: usize,
}

impl EnvState {
    /// Index of a present ball at `cell`.
    pub fn ball_at(&self, cell: (usize, usize)) -> Option<usize> {
        (0..self.ball_home.len()).find(|&b| self.ball_present[b] && self.ball_home[b] == cell)
    }

    fn restore_balls(&mut self) {
        self.ball_present.iter_mut().for_each(|p| *p = true);
        self.progress = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub event: Event,
}

/// Single-owner environment instance.
#[derive(Clone, Debug)]
pub struct HiddenOrderEnv {
    config: GridConfig,
    state: Option<EnvState>,
    seed: u64,
}

impl HiddenOrderEnv {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: None, seed: 0 })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> Result<&EnvState> {
        self.state.as_ref().ok_or_else(|| Error::Contract("environment has not been reset".into()))
    }

    /// Start an episode whose layout, order and pose depend only on `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = self.config.interior();
        let n = self.config.n_balls;
        let homes = (0..PLACEMENT_ATTEMPTS)
            .map(|_| {
                let picked: Vec<(usize, usize)> = cells.choose_multiple(&mut rng, n).copied().collect();
                picked
            })
            .find(|p| (0..n).all(|i| (0..i).all(|j| manhattan(p[i], p[j]) >= self.config.min_pair_distance)))
            .ok_or_else(|| Error::Config(format!("no ball placement found in {PLACEMENT_ATTEMPTS} attempts")))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let free: Vec<(usize, usize)> = cells.iter().copied().filter(|c| !homes.contains(c)).collect();
        let agent_pos = free[rng.random_range(0..free.len())];
        let agent_dir = Dir::ALL[rng.random_range(0..4)];
        let state = EnvState {
            agent_pos,
            agent_dir,
            ball_home: homes,
            ball_present: vec![true; n],
            hidden_order: order,
            progress: 0,
            rewarded: vec![false; n],
            step_count: 0,
            completions: 0,
        };
        let obs = render_obs(&self.config, &state);
        self.state = Some(state);
        self.seed = seed;
        Ok(obs)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        let cfg = &self.config;
        let s = self.state.as_mut().ok_or_else(|| Error::Contract("step before reset".into()))?;
        if s.step_count >= cfg.max_steps {
            return Err(Error::Contract("step after the episode ended".into()));
        }
        s.step_count += 1;
        let mut reward = 0.0;
        let mut event = Event::None;
        match action {
            Action::TurnLeft => s.agent_dir = s.agent_dir.left(),
            Action::TurnRight => s.agent_dir = s.agent_dir.right(),
            Action::Forward => {
                let (dr, dc) = s.agent_dir.delta();
                let (r, c) = (s.agent_pos.0 as isize + dr, s.agent_pos.1 as isize + dc);
                if cfg.is_wall(r, c) {
                    event = Event::Blocked;
                } else {
                    let cell = (r as usize, c as usize);
                    s.agent_pos = cell;
                    if let Some(ball) = s.ball_at(cell) {
                        (reward, event) = collect(cfg, s, ball);
                    }
                }
            }
        }
        let done = s.step_count == cfg.max_steps;
        Ok(StepOutcome { obs: render_obs(cfg, s), reward, done, event })
    }
}

fn collect(cfg: &GridConfig, s: &mut EnvState, ball: usize) -> (f64, Event) {
    if s.hidden_order[s.progress] != ball {
        if cfg.strict_visit_penalty {
            s.rewarded[ball] = true;
        }
        s.restore_balls();
        return (0.0, Event::WrongBall { ball });
    }
    let paid = !s.rewarded[ball];
    s.rewarded[ball] = true;
    s.ball_present[ball] = false;
    s.progress += 1;
    let reward = if paid { BALL_REWARD } else { 0.0 };
    if s.progress == cfg.n_balls {
        s.restore_balls();
        s.rewarded.iter_mut().for_each(|r| *r = false);
        s.completions += 1;
        return (reward, Event::Completed { ball, paid });
    }
    (reward, Event::Collected { ball, paid })
}
