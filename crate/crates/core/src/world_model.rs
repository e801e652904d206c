//! Types and pieces shared by both world models: batches, latent states,
//! prediction heads and the loss assembly.

use rand::Rng;

use crate::categorical::kl_balanced;
use crate::error::{contract, Result};
use crate::graph::{Bound, Graph, Var};
use crate::nn::{ConvDecoder, Mlp};
use crate::params::ParamSet;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Placeholder action for the first step of an episode; encodes as a zero vector.
pub const NULL_ACTION: usize = usize::MAX;

/// One-hot rows for `actions`, with [`NULL_ACTION`] as a zero row.
pub fn action_one_hot(actions: &[usize], n_actions: usize) -> Tensor {
    Tensor::one_hot(actions, n_actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Tssm,
    Rssm,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tssm" => Some(Self::Tssm),
            "rssm" => Some(Self::Rssm),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tssm => "tssm",
            Self::Rssm => "rssm",
        }
    }
}

/// Shape of the grouped categorical latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentDims {
    pub groups: usize,
    pub classes: usize,
}

impl LatentDims {
    pub fn flat(&self) -> usize {
        self.groups * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 || self.classes < 2 {
            return Err(contract(format!(
                "latent needs groups >= 1 and classes >= 2, got {}x{}",
                self.groups, self.classes
            )));
        }
        Ok(())
    }
}

/// Sizes of the observation networks and heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub image_size: usize,
    pub n_actions: usize,
    pub cnn_depth: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
}

/// Weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub eta_image: f64,
    pub eta_reward: f64,
    pub eta_discount: f64,
    pub kl_balance: f64,
    pub kl_free_nats: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { eta_image: 1.0, eta_reward: 1.0, eta_discount: 1.0, kl_balance: 0.8, kl_free_nats: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(contract(format!("kl_balance must lie in [0, 1], got {}", self.kl_balance)));
        }
        if self.kl_free_nats < 0.0 || self.eta_image < 0.0 || self.eta_reward < 0.0 || self.eta_discount < 0.0 {
            return Err(contract("loss scales and kl_free_nats must be nonnegative"));
        }
        Ok(())
    }
}

/// A padded batch of trajectories. Arrays indexed `[b, t]` are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub steps: usize,
    pub image_size: usize,
    /// `[batch, steps, size, size, 3]`, values in `[0, 1]`.
    pub images: Tensor,
    /// Action that led to each frame; [`NULL_ACTION`] at `t = 0`.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// 0 at terminal steps, 1 elsewhere.
    pub continues: Vec<f64>,
    pub mask: Vec<f64>,
}

impl EpisodeBatch {
    pub fn new(
        images: Tensor,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        continues: Vec<f64>,
        mask: Vec<f64>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 5 || s[2] != s[3] || s[4] != 3 {
            return Err(contract(format!("batch images must be [b, t, s, s, 3], got {s:?}")));
        }
        let (batch, steps, image_size) = (s[0], s[1], s[2]);
        let n = batch * steps;
        if actions.len() != n || rewards.len() != n || continues.len() != n || mask.len() != n {
            return Err(contract("batch arrays do not match [b, t]"));
        }
        let out = Self { batch, steps, image_size, images, actions, rewards, continues, mask };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for b in 0..self.batch {
            let row = &self.mask[b * self.steps..(b + 1) * self.steps];
            if row.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(contract("mask entries must be 0 or 1"));
            }
            if row.windows(2).any(|w| w[1] > w[0]) {
                return Err(contract(format!("mask row {b} is not a prefix mask")));
            }
        }
        if self.continues.iter().any(|&c| c != 0.0 && c != 1.0) {
            return Err(contract("continuation flags must be 0 or 1"));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn valid_len(&self, b: usize) -> usize {
        self.mask[b * self.steps..(b + 1) * self.steps].iter().filter(|&&m| m > 0.0).count()
    }

    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// Frames `start..start + len` of row `b` as `[len, s, s, 3]`.
    pub fn frames(&self, b: usize, start: usize, len: usize) -> Tensor {
        let f = self.frame_len();
        let off = (b * self.steps + start) * f;
        Tensor::new([len, self.image_size, self.image_size, 3], self.images.data()[off..off + len * f].to_vec())
    }

    /// Row `b` trimmed to its valid steps.
    pub fn row(&self, b: usize) -> EpisodeBatch {
        let t = self.valid_len(b);
        let r = b * self.steps..b * self.steps + t;
        let images = self.frames(b, 0, t);
        let s = self.image_size;
        EpisodeBatch {
            batch: 1,
            steps: t,
            image_size: s,
            images: images.reshape([1, t, s, s, 3]),
            actions: self.actions[r.clone()].to_vec(),
            rewards: self.rewards[r.clone()].to_vec(),
            continues: self.continues[r.clone()].to_vec(),
            mask: self.mask[r].to_vec(),
        }
    }
}

/// Full latent state: deterministic part and a one-hot stochastic block.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelState {
    pub h: Vec<f64>,
    /// `G·C` one-hot block.
    pub z: Vec<f64>,
    pub is_posterior: bool,
}

impl WorldModelState {
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.h.clone();
        f.extend_from_slice(&self.z);
        f
    }
}

/// Posterior samples and actions of a real trajectory prefix; the last
/// entry is the state imagination starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    /// One `G·C` sample per frame.
    pub zs: Vec<Vec<f64>>,
    /// Action that led to each frame, [`NULL_ACTION`] first.
    pub actions: Vec<usize>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.zs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }

    /// Prefix of a posterior state sequence, up to and including step `t`.
    pub fn from_states(states: &[WorldModelState], actions: &[usize], t: usize) -> Self {
        Self { zs: states[..=t].iter().map(|s| s.z.clone()).collect(), actions: actions[..=t].to_vec() }
    }
}

/// Chooses actions during imagination.
pub trait LatentPolicy {
    /// `features` is `[1, feature_dim]`. Returns a `[1, n_actions]` one-hot
    /// whose gradient flows back into the policy (straight-through).
    fn act(&mut self, g: &mut Graph, features: Var, rng: &mut StreamRng) -> Result<Var>;
}

/// Imagined trajectory on the graph. `features[0]` is the start state;
/// `rewards[τ]` and `continues[τ]` are predicted at `features[τ + 1]`.
#[derive(Clone, Debug)]
pub struct Imagined {
    pub features: Vec<Var>,
    pub hs: Vec<Var>,
    pub zs: Vec<Var>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    /// Continuation probabilities.
    pub continues: Vec<Var>,
}

impl Imagined {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Open-loop predictions for the generated steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoop {
    /// `[steps, s, s, 3]` image means.
    pub images: Tensor,
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
    pub states: Vec<WorldModelState>,
}

/// Loss terms on the graph; each component is a masked mean over valid steps.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub image: Var,
    pub reward: Var,
    pub discount: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub image: f64,
    pub reward: f64,
    pub discount: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, l: &LossVars) -> Self {
        Self {
            total: g.value(l.total).item(),
            image: g.value(l.image).item(),
            reward: g.value(l.reward).item(),
            discount: g.value(l.discount).item(),
            kl: g.value(l.kl).item(),
        }
    }
}

/// Image, reward and continuation predictors over state features.
#[derive(Clone, Debug)]
pub struct Heads {
    decoder: ConvDecoder,
    reward: Mlp,
    discount: Mlp,
}

impl Heads {
    pub fn new(ps: &mut ParamSet, feature_dim: usize, net: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            decoder: ConvDecoder::new(ps, "decoder", feature_dim, net.image_size, net.cnn_depth, rng)?,
            reward: Mlp::new(ps, "reward", feature_dim, net.mlp_hidden, 2, 1, rng),
            discount: Mlp::new(ps, "discount", feature_dim, net.mlp_hidden, 2, 1, rng),
        })
    }

    /// `[n, F]` → `[n, s, s, 3]`.
    pub fn image(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        self.decoder.forward(g, p, feat)
    }

    /// `[n, F]` → `[n]`.
    pub fn reward(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        let n = g.shape(feat)[0];
        let r = self.reward.forward(g, p, feat);
        g.reshape(r, &[n])
    }

    /// `[n, F]` → `[n]` continuation logits.
    pub fn discount_logit(&self, g: &mut Graph, p: &Bound, feat: Var) -> Var {
        let n = g.shape(feat)[0];
        let r = self.discount.forward(g, p, feat);
        g.reshape(r, &[n])
    }

    /// Plain-value predictions for one state: (image `[s, s, 3]`, reward, continuation probability).
    pub fn predict(&self, p_set: &ParamSet, features: &[f64]) -> (Tensor, f64, f64) {
        let mut g = Graph::new();
        let p = g.bind(p_set);
        let f = g.constant(Tensor::new([1, features.len()], features.to_vec()));
        let img = self.image(&mut g, &p, f);
        let r = self.reward(&mut g, &p, f);
        let c = self.discount_logit(&mut g, &p, f);
        let c = g.sigmoid(c);
        let img = g.value(img).clone();
        let s = img.shape()[1];
        (img.reshape([s, s, 3]), g.value(r).item(), g.value(c).item())
    }
}

/// Masked-mean loss from per-step features `[n, F]` and latent logits
/// `[n, G, C]`, where `n = batch · steps` in row-major `(b, t)` order.
pub(crate) fn assemble_loss(
    g: &mut Graph,
    p: &Bound,
    heads: &Heads,
    cfg: &LossConfig,
    feat: Var,
    post_logits: Var,
    prior_logits: Var,
    batch: &EpisodeBatch,
) -> Result<LossVars> {
    let n = batch.batch * batch.steps;
    let valid = batch.valid_steps();
    if valid == 0 {
        return Err(contract("loss over an empty mask"));
    }
    let mask = Tensor::new([n], batch.mask.clone());
    let inv = 1.0 / valid as f64;
    let masked_mean = |g: &mut Graph, per_step: Var| {
        let m = g.mul_const(per_step, mask.clone());
        let s = g.sum(m);
        g.scale(s, inv)
    };

    let target = batch.images.clone().reshape([n, batch.frame_len()]);
    let x_hat = heads.image(g, p, feat);
    let x_hat = g.reshape(x_hat, &[n, batch.frame_len()]);
    let neg_target = g.constant(target.map(|v| -v));
    let diff = g.add(x_hat, neg_target);
    let sq = g.square(diff);
    let img = g.sum_last(sq);
    let img = g.scale(img, 0.5);
    let image = masked_mean(g, img);

    let r_hat = heads.reward(g, p, feat);
    let r = g.add_const(r_hat, &Tensor::new([n], batch.rewards.iter().map(|v| -v).collect()));
    let r = g.square(r);
    let r = g.scale(r, 0.5);
    let reward = masked_mean(g, r);

    // Bernoulli NLL from logits: softplus(l) − y·l.
    let logit = heads.discount_logit(g, p, feat);
    let sp = g.softplus(logit);
    let yl = g.mul_const(logit, Tensor::new([n], batch.continues.clone()));
    let d = g.sub(sp, yl);
    let discount = masked_mean(g, d);

    let kl_steps = kl_balanced(g, post_logits, prior_logits, cfg.kl_balance)?;
    let kl = masked_mean(g, kl_steps);
    let kl_term = if cfg.kl_free_nats > 0.0 {
        let c = g.clamp_min(kl_steps, cfg.kl_free_nats);
        masked_mean(g, c)
    } else {
        kl
    };

    let a = g.scale(image, cfg.eta_image);
    let b = g.scale(reward, cfg.eta_reward);
    let c = g.scale(discount, cfg.eta_discount);
    let total = g.add(a, b);
    let total = g.add(total, c);
    let total = g.add(total, kl_term);
    Ok(LossVars { total, image, reward, discount, kl })
}
