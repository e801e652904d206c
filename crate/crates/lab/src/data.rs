//! Conversions between environment episodes and world-model data, and the
//! learned agent as an environment policy.

use hidden_order::{
    render_obs, replay_record, Action, EpisodeRecord, GridConfig, HiddenOrderEnv, Observation, Policy, Replayed,
};
use tssm_core::agent::{ActMode, Agent};
use tssm_core::model::{FilterState, WorldModel};
use tssm_core::replay::{quantize, Episode};
use tssm_core::rng::StreamRng;
use tssm_core::world_model::{WorldModelState, NULL_ACTION};
use tssm_core::Tensor;

use crate::error::Result;

/// An observation as the models see it: quantized to 8 bits, `[s, s, 3]`.
pub fn model_frame(obs: &Observation) -> Tensor {
    let s = obs.size;
    Tensor::new([s, s, 3], obs.pixels.iter().map(|&v| quantize(v) as f64 / 255.0).collect())
}

/// Regenerate an episode's frames from its record.
pub fn episode_from_record(cfg: &GridConfig, rec: &EpisodeRecord) -> Result<(Episode, Replayed)> {
    let replayed = replay_record(cfg, rec)?;
    let mut ep = Episode::begin(cfg.render_size, &replayed.observations[0].pixels)?;
    for (s, obs) in rec.steps.iter().zip(&replayed.observations[1..]) {
        ep.push_frame(&obs.pixels, s.action as usize, s.reward as f64, s.done == 0)?;
    }
    Ok((ep, replayed))
}

/// Acts with the agent on world-model states filtered online from the
/// frames seen so far. Latent sampling and action sampling use separate
/// streams, so the filter draws match an offline pass over the episode.
pub struct AgentPolicy<'a> {
    wm: &'a WorldModel,
    agent: &'a Agent,
    mode: ActMode,
    filter_rng: &'a mut StreamRng,
    action_rng: &'a mut StreamRng,
    filter: Option<FilterState>,
    last_action: usize,
    /// Filtered states of the current episode, one per frame seen.
    pub states: Vec<WorldModelState>,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(
        wm: &'a WorldModel,
        agent: &'a Agent,
        mode: ActMode,
        filter_rng: &'a mut StreamRng,
        action_rng: &'a mut StreamRng,
    ) -> Self {
        Self { wm, agent, mode, filter_rng, action_rng, filter: None, last_action: NULL_ACTION, states: Vec::new() }
    }
}

impl Policy for AgentPolicy<'_> {
    fn act(&mut self, env: &HiddenOrderEnv) -> hidden_order::Result<Action> {
        let s = env.state()?;
        if s.step_count == 0 || self.filter.is_none() {
            self.filter = Some(self.wm.filter_begin());
            self.last_action = NULL_ACTION;
            self.states.clear();
        }
        let frame = model_frame(&render_obs(env.config(), s));
        let filter = self.filter.as_mut().expect("filter started above");
        let to_env = |e: tssm_core::Error| hidden_order::Error::Contract(format!("agent policy: {e}"));
        let state = self.wm.filter_step(filter, &frame, self.last_action, self.filter_rng).map_err(to_env)?;
        let a = self.agent.act(&state.features(), self.mode, self.action_rng).map_err(to_env)?;
        self.states.push(state);
        self.last_action = a;
        Action::from_index(a)
    }
}
