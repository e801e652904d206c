//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use hidden_order::GridConfig;
use rand::Rng;
use sha2::{Digest, Sha256};
use tssm_core::agent::AgentConfig;
use tssm_core::model::WorldModel;
use tssm_core::replay::ReplayConfig;
use tssm_core::rssm::{Rssm, RssmConfig};
use tssm_core::transformer::{Gating, Positional, TransformerConfig};
use tssm_core::tssm::{Tssm, TssmConfig};
use tssm_core::world_model::{LatentDims, LossConfig, ModelKind, NetConfig};

use crate::error::{LabError, Result};

/// Imagination length per agent update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// Up to the last frame of the sampled episode.
    ToEnd,
    Fixed(usize),
}

trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($t:ty, $what:literal) => {
        impl ConfigValue for $t {
            const EXPECTED: &'static str = $what;
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    };
}

from_str_value!(usize, "a non-negative integer");
from_str_value!(u64, "a non-negative integer");
from_str_value!(f64, "a number");
from_str_value!(bool, "true or false");

impl ConfigValue for ModelKind {
    const EXPECTED: &'static str = "tssm or rssm";
    fn parse(s: &str) -> Option<Self> {
        ModelKind::parse(s)
    }
    fn show(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for Gating {
    const EXPECTED: &'static str = "none, identity_map_reordering or gru_gate";
    fn parse(s: &str) -> Option<Self> {
        Gating::parse(s)
    }
    fn show(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for Positional {
    const EXPECTED: &'static str = "learned_absolute or relative";
    fn parse(s: &str) -> Option<Self> {
        Positional::parse(s)
    }
    fn show(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for Horizon {
    const EXPECTED: &'static str = "`end` or a positive integer";
    fn parse(s: &str) -> Option<Self> {
        match s {
            "end" => Some(Horizon::ToEnd),
            _ => s.parse().ok().filter(|&n| n > 0).map(Horizon::Fixed),
        }
    }
    fn show(&self) -> String {
        match self {
            Horizon::ToEnd => "end".into(),
            Horizon::Fixed(n) => n.to_string(),
        }
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value).ok_or_else(|| LabError::ConfigValue {
                            key: key.into(),
                            value: value.into(),
                            expected: <$ty as ConfigValue>::EXPECTED,
                        })?;
                    } )*
                    _ => return Err(LabError::UnknownKey(key.into())),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.show()) ),*]
            }
        }
    };
}

run_config! {
    model: ModelKind = ModelKind::Tssm,
    seed: u64 = 0,

    grid_size: usize = 8,
    n_balls: usize = 4,
    min_pair_distance: usize = 2,
    max_steps: usize = 100,
    view_cells: usize = 5,
    render_size: usize = 64,
    strict_visit_penalty: bool = false,

    latent_groups: usize = 32,
    latent_classes: usize = 32,
    cnn_depth: usize = 32,
    embed_dim: usize = 512,
    mlp_hidden: usize = 200,

    n_layers: usize = 6,
    n_heads: usize = 10,
    d_model: usize = 200,
    d_ff: usize = 400,
    gating: Gating = Gating::IdentityMapReordering,
    positional: Positional = Positional::LearnedAbsolute,
    concat_layer_outputs: bool = true,
    /// Learned positions; 0 means one episode of frames (`max_steps + 1`).
    max_context: usize = 0,

    rssm_hidden: usize = 200,

    kl_balance: f64 = 0.8,
    kl_free_nats: f64 = 0.0,
    eta_image: f64 = 1.0,
    eta_reward: f64 = 1.0,
    eta_discount: f64 = 1.0,

    horizon: Horizon = Horizon::ToEnd,
    gamma: f64 = 0.99,
    lambda: f64 = 0.95,
    rho: f64 = 0.0,
    eta_ent: f64 = 1e-3,
    /// Imagination start states per agent update.
    start_states: usize = 1,
    slow_critic_update: usize = 100,
    epsilon: f64 = 0.0,
    epsilon_final: f64 = 0.0,
    epsilon_decay_steps: u64 = 0,
    agent_hidden: usize = 200,
    agent_layers: usize = 2,
    actor_lr: f64 = 4e-5,
    critic_lr: f64 = 1e-4,

    wm_lr: f64 = 2e-4,
    grad_clip: f64 = 100.0,
    weight_decay: f64 = 0.0,

    replay_capacity: usize = 200_000,
    replay_alpha: f64 = 0.5,
    batch_size: usize = 16,
    /// Episodes filtered per agent update to draw start states from.
    agent_batch_size: usize = 4,

    prefill_steps: usize = 5000,
    steps_per_cycle: usize = 100,
    wm_updates: usize = 1,
    agent_updates: usize = 1,
    total_steps: usize = 1_000_000,
    /// Environment steps between checkpoints; 0 keeps only the final one.
    checkpoint_every: usize = 0,
    /// Write elapsed seconds into the metrics; off gives byte-identical reruns.
    record_wallclock: bool = true,
}

/// Keys that only bound or describe a run and may differ on resume.
const RUN_EXTENT_KEYS: &[&str] = &["seed", "total_steps", "checkpoint_every", "record_wallclock"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LabError::ConfigSyntax {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(LabError::ConfigSyntax { line: i + 1, msg: format!("key {k} appears twice") });
            }
            cfg.set(k, v)?;
            seen.push(k.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Digest of everything that shapes the models and the learning problem.
    pub fn config_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !RUN_EXTENT_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            grid_size: self.grid_size,
            n_balls: self.n_balls,
            min_pair_distance: self.min_pair_distance,
            max_steps: self.max_steps,
            view_cells: self.view_cells,
            render_size: self.render_size,
            strict_visit_penalty: self.strict_visit_penalty,
            ..GridConfig::default()
        }
    }

    pub fn frames_per_episode(&self) -> usize {
        self.max_steps + 1
    }

    fn latent(&self) -> LatentDims {
        LatentDims { groups: self.latent_groups, classes: self.latent_classes }
    }

    fn net(&self) -> NetConfig {
        NetConfig {
            image_size: self.render_size,
            n_actions: hidden_order::Action::COUNT,
            cnn_depth: self.cnn_depth,
            embed_dim: self.embed_dim,
            mlp_hidden: self.mlp_hidden,
        }
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            eta_image: self.eta_image,
            eta_reward: self.eta_reward,
            eta_discount: self.eta_discount,
            kl_balance: self.kl_balance,
            kl_free_nats: self.kl_free_nats,
        }
    }

    pub fn tssm(&self) -> TssmConfig {
        let max_len = if self.max_context == 0 { self.frames_per_episode() } else { self.max_context };
        TssmConfig {
            transformer: TransformerConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                gating: self.gating,
                positional: self.positional,
                concat_layer_outputs: self.concat_layer_outputs,
                max_len,
            },
            latent: self.latent(),
            net: self.net(),
            loss: self.loss(),
        }
    }

    pub fn rssm(&self) -> RssmConfig {
        RssmConfig { d_hidden: self.rssm_hidden, latent: self.latent(), net: self.net(), loss: self.loss() }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            horizon: match self.horizon {
                Horizon::ToEnd => self.max_steps,
                Horizon::Fixed(n) => n,
            },
            gamma: self.gamma,
            lambda: self.lambda,
            rho: self.rho,
            eta_ent: self.eta_ent,
            start_count: self.start_states,
            slow_critic_update: self.slow_critic_update,
            epsilon: self.epsilon,
            epsilon_final: self.epsilon_final,
            epsilon_decay_steps: self.epsilon_decay_steps,
            hidden: self.agent_hidden,
            n_hidden: self.agent_layers,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            grad_clip: self.grad_clip,
        }
    }

    pub fn replay(&self) -> ReplayConfig {
        ReplayConfig { capacity: self.replay_capacity, alpha: self.replay_alpha }
    }

    pub fn build_world_model(&self, rng: &mut impl Rng) -> Result<WorldModel> {
        Ok(match self.model {
            ModelKind::Tssm => WorldModel::Tssm(Tssm::new(self.tssm(), rng)?),
            ModelKind::Rssm => WorldModel::Rssm(Rssm::new(self.rssm(), rng)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        self.grid().validate()?;
        self.tssm().validate()?;
        self.rssm().validate()?;
        self.agent().validate()?;
        self.replay().validate()?;
        if self.model == ModelKind::Tssm
            && self.positional == Positional::LearnedAbsolute
            && self.tssm().max_context() < self.frames_per_episode()
        {
            return bad(format!(
                "max_context {} cannot hold an episode of {} frames",
                self.max_context,
                self.frames_per_episode()
            ));
        }
        if self.prefill_steps < self.max_steps {
            return bad(format!(
                "prefill_steps {} is shorter than one episode ({})",
                self.prefill_steps, self.max_steps
            ));
        }
        for (k, v) in [
            ("steps_per_cycle", self.steps_per_cycle),
            ("batch_size", self.batch_size),
            ("agent_batch_size", self.agent_batch_size),
            ("total_steps", self.total_steps),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.replay_capacity < self.max_steps {
            return bad("replay_capacity must hold at least one episode".into());
        }
        if !(self.wm_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("wm_lr must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}
