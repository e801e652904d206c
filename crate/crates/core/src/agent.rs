//! Actor-critic trained on imagined rollouts of a frozen world model.

use rand::Rng;

use crate::categorical::{sample_index, sample_one_hot, softmax_groups};
use crate::error::{contract, Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::model::WorldModel;
use crate::nn::Mlp;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::world_model::{Context, Imagined, LatentPolicy};

/// Predicted continuation probabilities are kept inside `[CONT_CLAMP, 1 − CONT_CLAMP]`.
pub const CONT_CLAMP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Weight of the dynamics-backpropagation term; `1 − rho` goes to REINFORCE.
    pub rho: f64,
    pub eta_ent: f64,
    /// Imagination start states per update.
    pub start_count: usize,
    /// Copy the critic into the slow critic every this many updates.
    pub slow_critic_update: usize,
    /// Uniform-action mixing in explore mode, decayed linearly to
    /// `epsilon_final` over `epsilon_decay_steps` calls to [`Agent::decay_epsilon`].
    pub epsilon: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_steps: u64,
    pub hidden: usize,
    pub n_hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            rho: 0.0,
            eta_ent: 1e-3,
            start_count: 1,
            slow_critic_update: 100,
            epsilon: 0.0,
            epsilon_final: 0.0,
            epsilon_decay_steps: 0,
            hidden: 200,
            n_hidden: 2,
            actor_lr: 4e-5,
            critic_lr: 1e-4,
            grad_clip: 100.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.horizon == 0 {
            return Err(contract("horizon must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(contract(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !unit(self.lambda) || !unit(self.rho) || !unit(self.epsilon) || !unit(self.epsilon_final) {
            return Err(contract("lambda, rho and epsilon must lie in [0, 1]"));
        }
        if !(self.eta_ent >= 0.0) {
            return Err(contract("eta_ent must be non-negative"));
        }
        if self.start_count == 0 || self.slow_critic_update == 0 || self.hidden == 0 {
            return Err(contract("start_count, slow_critic_update and hidden must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.grad_clip > 0.0) {
            return Err(contract("learning rates and grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Backward recursion `V_t = r_t + γ·c_t·((1 − λ)·v_{t+1} + λ·V_{t+1})`, with `V_H = v_H`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], continues: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if values.len() != h + 1 || continues.len() != h {
        return Err(contract(format!(
            "lambda_returns needs H rewards, H+1 values and H continues; got {}, {}, {}",
            h,
            values.len(),
            continues.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph version of [`lambda_returns`] over `[1]`-shaped scalars.
pub fn lambda_returns_g(
    g: &mut Graph,
    rewards: &[Var],
    values: &[Var],
    continues: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    let h = rewards.len();
    if values.len() != h + 1 || continues.len() != h {
        return Err(contract("lambda_returns_g length mismatch"));
    }
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let a = g.scale(values[t + 1], 1.0 - lambda);
        let b = g.scale(next, lambda);
        let mix = g.add(a, b);
        let disc = g.mul(continues[t], mix);
        let disc = g.scale(disc, gamma);
        next = g.add(rewards[t], disc);
        out[t] = next;
    }
    Ok(out)
}

/// Stop-gradient weights `w_0 = 1`, `w_t = Π_{k<t} γ·c_k`.
pub fn trajectory_weights(continues: &[f64], gamma: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(continues.len());
    let mut acc = 1.0;
    for &c in continues {
        w.push(acc);
        acc *= gamma * c;
    }
    w
}

/// One imagined rollout with the policy's per-step statistics, all `[1]`-shaped
/// except `features` (`[1, F]`, length H+1).
#[derive(Clone, Debug)]
pub struct ImaginedTrajectory {
    pub features: Vec<Var>,
    pub actions: Vec<usize>,
    pub rewards: Vec<Var>,
    /// Clamped continuation probabilities.
    pub continues: Vec<Var>,
    pub log_probs: Vec<Var>,
    pub entropies: Vec<Var>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Parameter handles of an [`Agent`] bound into one graph.
pub struct AgentBound {
    pub actor: Bound,
    pub critic: Bound,
    pub slow: Bound,
}

/// Per-step policy statistics collected while a world model imagines.
pub struct ImaginationPolicy<'a> {
    agent: &'a Agent,
    bound: &'a Bound,
    actions: Vec<usize>,
    log_probs: Vec<Var>,
    entropies: Vec<Var>,
}

impl<'a> ImaginationPolicy<'a> {
    pub fn new(agent: &'a Agent, bound: &'a AgentBound) -> Self {
        Self { agent, bound: &bound.actor, actions: vec![], log_probs: vec![], entropies: vec![] }
    }

    /// Combine the recorded statistics with the world model's rollout.
    pub fn finish(self, g: &mut Graph, im: Imagined) -> ImaginedTrajectory {
        let hi = 1.0 - CONT_CLAMP;
        let continues = im
            .continues
            .iter()
            .map(|&c| {
                let c = g.reshape(c, &[1]);
                let c = g.clamp_min(c, CONT_CLAMP);
                // min(c, hi) == hi − max(hi − c, 0)
                let gap = g.neg(c);
                let gap = g.add_scalar(gap, hi);
                let gap = g.clamp_min(gap, 0.0);
                let gap = g.neg(gap);
                g.add_scalar(gap, hi)
            })
            .collect();
        let rewards = im.rewards.iter().map(|&r| g.reshape(r, &[1])).collect();
        ImaginedTrajectory {
            features: im.features,
            actions: self.actions,
            rewards,
            continues,
            log_probs: self.log_probs,
            entropies: self.entropies,
        }
    }
}

impl LatentPolicy for ImaginationPolicy<'_> {
    fn act(&mut self, g: &mut Graph, features: Var, rng: &mut StreamRng) -> Result<Var> {
        let logits = self.agent.actor.forward(g, self.bound, features);
        let logp_all = g.log_softmax(logits);
        let probs = g.softmax(logits);
        if !g.value(probs).is_finite() {
            return Err(Error::NumericDomain("non-finite policy".into()));
        }
        let sample = sample_one_hot(g.value(probs), rng);
        let index = sample.data().iter().position(|&v| v == 1.0).expect("one-hot sample");
        let chosen = g.mul_const(logp_all, sample.clone());
        let logp = g.sum_last(chosen);
        let plogp = g.mul(probs, logp_all);
        let ent = g.sum_last(plogp);
        let ent = g.neg(ent);
        self.actions.push(index);
        self.log_probs.push(g.reshape(logp, &[1]));
        self.entropies.push(g.reshape(ent, &[1]));
        // Only the dynamics term needs gradients through the action itself.
        Ok(if self.agent.config.rho > 0.0 { g.straight_through(probs, sample) } else { g.constant(sample) })
    }
}

/// Quantities derived from a trajectory that both losses share.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `V_λ` on the graph (differentiable through the dynamics when `rho > 0`).
    pub returns: Vec<Var>,
    /// Slow-critic values at each of the H+1 states.
    pub slow_values: Vec<Var>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub feature_dim: usize,
    pub n_actions: usize,
    actor: Mlp,
    critic: Mlp,
    pub actor_params: ParamSet,
    pub critic_params: ParamSet,
    pub slow_critic_params: ParamSet,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    /// Completed updates.
    pub updates: u64,
    epsilon_calls: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, feature_dim: usize, n_actions: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || n_actions == 0 {
            return Err(contract("agent needs positive feature and action sizes"));
        }
        let mut actor_params = ParamSet::new();
        let actor = Mlp::new(&mut actor_params, "actor", feature_dim, config.hidden, config.n_hidden, n_actions, rng);
        let mut critic_params = ParamSet::new();
        let critic = Mlp::new(&mut critic_params, "critic", feature_dim, config.hidden, config.n_hidden, 1, rng);
        let slow_critic_params = critic_params.clone();
        let opt = |lr: f64| AdamWConfig { clip: Some(config.grad_clip), ..AdamWConfig::with_lr(lr) };
        Ok(Self {
            actor_opt: AdamW::new(opt(config.actor_lr), &actor_params),
            critic_opt: AdamW::new(opt(config.critic_lr), &critic_params),
            config,
            feature_dim,
            n_actions,
            actor,
            critic,
            actor_params,
            critic_params,
            slow_critic_params,
            updates: 0,
            epsilon_calls: 0,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> AgentBound {
        AgentBound {
            actor: g.bind(&self.actor_params),
            critic: g.bind(&self.critic_params),
            slow: g.bind(&self.slow_critic_params),
        }
    }

    /// Policy probabilities for one feature vector.
    pub fn action_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(contract(format!("expected {} features, got {}", self.feature_dim, features.len())));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.actor_params);
        let x = g.constant(Tensor::new([1, self.feature_dim], features.to_vec()));
        let l = self.actor.forward(&mut g, &p, x);
        Ok(softmax_groups(g.value(l))?.into_data())
    }

    /// Current exploration rate.
    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        if c.epsilon_decay_steps == 0 {
            return c.epsilon;
        }
        let f = (self.epsilon_calls as f64 / c.epsilon_decay_steps as f64).min(1.0);
        c.epsilon + (c.epsilon_final - c.epsilon) * f
    }

    /// Advance the exploration schedule by one environment step.
    pub fn decay_epsilon(&mut self) {
        self.epsilon_calls += 1;
    }

    pub fn epsilon_calls(&self) -> u64 {
        self.epsilon_calls
    }

    pub fn set_epsilon_calls(&mut self, n: u64) {
        self.epsilon_calls = n;
    }

    /// Sample (explore) or take the most probable action (eval).
    pub fn act(&self, features: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<usize> {
        let probs = self.action_probs(features)?;
        Ok(match mode {
            ActMode::Eval => probs.iter().enumerate().fold(0, |best, (i, &p)| if p > probs[best] { i } else { best }),
            ActMode::Explore => {
                let eps = self.epsilon();
                if eps > 0.0 && rng.random::<f64>() < eps {
                    rng.random_range(0..self.n_actions)
                } else {
                    sample_index(&probs, rng)
                }
            }
        })
    }

    pub fn critic_value_g(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        let v = self.critic.forward(g, p, features);
        g.reshape(v, &[1])
    }

    /// Imagine `horizon` steps from the last state of `ctx` with the current policy.
    #[allow(clippy::too_many_arguments)]
    pub fn imagine(
        &self,
        g: &mut Graph,
        wm: &WorldModel,
        wm_bound: &Bound,
        bound: &AgentBound,
        ctx: &Context,
        horizon: usize,
        rng: &mut StreamRng,
    ) -> Result<ImaginedTrajectory> {
        let mut policy = ImaginationPolicy::new(self, bound);
        let im = wm.imagine_rollout(g, wm_bound, ctx, &mut policy, horizon, None, rng)?;
        Ok(policy.finish(g, im))
    }

    pub fn targets(&self, g: &mut Graph, bound: &AgentBound, traj: &ImaginedTrajectory) -> Result<Targets> {
        let h = traj.horizon();
        if h == 0 {
            return Err(contract("trajectory of length 0"));
        }
        if traj.features.len() != h + 1
            || traj.rewards.len() != h
            || traj.continues.len() != h
            || traj.log_probs.len() != h
            || traj.entropies.len() != h
        {
            return Err(contract("inconsistent imagined trajectory lengths"));
        }
        let slow_values: Vec<Var> = traj.features.iter().map(|&f| self.critic_value_g(g, &bound.slow, f)).collect();
        let returns =
            lambda_returns_g(g, &traj.rewards, &slow_values, &traj.continues, self.config.gamma, self.config.lambda)?;
        let conts: Vec<f64> = traj.continues.iter().map(|&c| g.value(c).item()).collect();
        let weights = trajectory_weights(&conts, self.config.gamma);
        Ok(Targets { returns, slow_values, weights })
    }

    /// `−Σ_t w_t·[ρ·V_λ,t + (1 − ρ)·log π(a_t)·sg(V_λ,t − v_t) + η_ent·H_t]`.
    pub fn actor_loss(&self, g: &mut Graph, traj: &ImaginedTrajectory, targets: &Targets) -> Result<Var> {
        let c = &self.config;
        let mut terms = Vec::with_capacity(traj.horizon());
        for t in 0..traj.horizon() {
            let mut inner = g.scale(traj.entropies[t], c.eta_ent);
            if c.rho > 0.0 {
                let d = g.scale(targets.returns[t], c.rho);
                inner = g.add(inner, d);
            }
            if c.rho < 1.0 {
                let adv = g.value(targets.returns[t]).item() - g.value(targets.slow_values[t]).item();
                let r = g.scale(traj.log_probs[t], (1.0 - c.rho) * adv);
                inner = g.add(inner, r);
            }
            terms.push(g.scale(inner, -targets.weights[t]));
        }
        let all = g.concat(&terms, 0);
        Ok(g.sum(all))
    }

    /// `Σ_t w_t·(v(s_t) − sg(V_λ,t))² / Σ_t w_t`, with the features detached.
    pub fn critic_loss(
        &self,
        g: &mut Graph,
        bound: &AgentBound,
        traj: &ImaginedTrajectory,
        targets: &Targets,
    ) -> Result<Var> {
        let h = traj.horizon();
        if h == 0 {
            return Err(contract("trajectory of length 0"));
        }
        let wsum: f64 = targets.weights.iter().sum();
        let mut terms = Vec::with_capacity(h);
        for t in 0..h {
            let f = g.detach(traj.features[t]);
            let v = self.critic_value_g(g, &bound.critic, f);
            let target = g.value(targets.returns[t]).item();
            let d = g.add_scalar(v, -target);
            let sq = g.square(d);
            terms.push(g.scale(sq, targets.weights[t] / wsum));
        }
        let all = g.concat(&terms, 0);
        Ok(g.sum(all))
    }

    /// Copy the critic into the slow critic when the update counter is on a period boundary.
    pub fn sync_slow_critic(&mut self) -> Result<bool> {
        if self.updates % self.config.slow_critic_update as u64 == 0 {
            self.slow_critic_params.copy_from(&self.critic_params)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// One actor and critic update from `starts`. The world model must be frozen.
    pub fn update(&mut self, wm: &WorldModel, starts: &[(Context, usize)], rng: &mut StreamRng) -> Result<AgentStats> {
        if !wm.params().is_frozen() {
            return Err(contract("world model must be frozen during agent updates"));
        }
        if starts.is_empty() {
            return Err(contract("agent update without start states"));
        }
        self.update_with(rng, |agent, g, ab, rng| {
            let wb = g.bind(wm.params());
            let mut out = Vec::with_capacity(starts.len());
            for (ctx, horizon) in starts {
                if *horizon > 0 {
                    out.push(agent.imagine(g, wm, &wb, ab, ctx, *horizon, rng)?);
                }
            }
            Ok(out)
        })
    }

    /// One actor and critic update on trajectories produced by `imagine`,
    /// averaged over them.
    pub fn update_with<F>(&mut self, rng: &mut StreamRng, imagine: F) -> Result<AgentStats>
    where
        F: FnOnce(&Agent, &mut Graph, &AgentBound, &mut StreamRng) -> Result<Vec<ImaginedTrajectory>>,
    {
        self.sync_slow_critic()?;
        let mut g = Graph::new();
        let ab = self.bind(&mut g);
        let trajs = imagine(self, &mut g, &ab, rng)?;
        if trajs.is_empty() {
            return Err(contract("no imagined trajectories to learn from"));
        }
        let k = trajs.len() as f64;
        let mut actor_terms = Vec::with_capacity(trajs.len());
        let mut critic_terms = Vec::with_capacity(trajs.len());
        let (mut entropy, mut ret, mut steps) = (0.0, 0.0, 0.0);
        for traj in &trajs {
            let targets = self.targets(&mut g, &ab, traj)?;
            let a = self.actor_loss(&mut g, traj, &targets)?;
            let c = self.critic_loss(&mut g, &ab, traj, &targets)?;
            actor_terms.push(g.scale(a, 1.0 / k));
            critic_terms.push(g.scale(c, 1.0 / k));
            entropy += traj.entropies.iter().map(|&e| g.value(e).item()).sum::<f64>();
            ret += g.value(targets.returns[0]).item();
            steps += traj.horizon() as f64;
        }
        let actor = actor_terms.into_iter().reduce(|a, b| g.add(a, b)).expect("non-empty");
        let critic = critic_terms.into_iter().reduce(|a, b| g.add(a, b)).expect("non-empty");
        let stats = AgentStats {
            actor_loss: g.value(actor).item(),
            critic_loss: g.value(critic).item(),
            entropy: entropy / steps,
            mean_return: ret / k,
        };
        if !stats.actor_loss.is_finite() || !stats.critic_loss.is_finite() {
            return Err(Error::NumericDomain(format!("agent loss is not finite: {stats:?}")));
        }
        let actor_grads = g.backward(actor).for_set(&self.actor_params);
        let critic_grads = g.backward(critic).for_set(&self.critic_params);
        self.actor_opt.step(&mut self.actor_params, actor_grads)?;
        self.critic_opt.step(&mut self.critic_params, critic_grads)?;
        self.updates += 1;
        Ok(stats)
    }
}
