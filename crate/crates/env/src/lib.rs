//! Hidden Order Discovery: a partially observable gridworld.
//!
//! Balls sit on the floor of a walled grid and must be collected in a hidden
//! order. Walking into the right ball pays +3 the first time it is collected
//! in a reward cycle; walking into a wrong ball restores every ball without
//! moving the agent. Completing the order restores the balls and starts a new
//! reward cycle. The agent sees only an egocentric window in front of it.

mod collector;
mod config;
mod env;
mod error;
mod record;
mod render;

pub use collector::{
    random_episode, run_episode, scripted_episode, step_towards, Policy, RandomPolicy, ScriptedCollector,
};
pub use config::{GridConfig, DEFAULT_PALETTE};
pub use env::{Action, Dir, EnvState, Event, HiddenOrderEnv, StepOutcome, BALL_REWARD};
pub use error::{Error, Result};
pub use record::{
    episode_success, read_records, replay_record, write_records, EpisodeRecord, Replayed, StepRecord, RECORD_MAGIC,
    RECORD_VERSION,
};
pub use render::{foreground_mask, render_obs, Observation, AGENT_COLOR, FLOOR_COLOR, WALL_COLOR};
