//! Transformer state-space model.
//!
//! The posterior over `z_t` sees only frame `x_t`, so every posterior in a
//! batch is computed at once. The deterministic state `h_t` is the output at
//! position `t` of a causal transformer whose input at position 0 is a learned
//! start token and whose input at position `k + 1` embeds `(z_k, a_{k+1})`.
//! The prior over `z_t` is a function of `h_t` alone.

use rand::Rng;

use crate::categorical::{sample_one_hot, straight_through_sample, CategoricalLatent};
use crate::error::{contract, Result};
use crate::graph::{Bound, Graph, Var};
use crate::nn::{ConvEncoder, Linear, Mlp};
use crate::params::{ParamId, ParamSet};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::transformer::{Gating, KvCache, KvSnapshot, Positional, Transformer, TransformerConfig};
use crate::world_model::{
    action_one_hot, assemble_loss, Context, EpisodeBatch, Heads, Imagined, LatentDims, LatentPolicy, LossConfig,
    LossVars, NetConfig, OpenLoop, WorldModelState,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TssmConfig {
    pub transformer: TransformerConfig,
    pub latent: LatentDims,
    pub net: NetConfig,
    pub loss: LossConfig,
}

impl TssmConfig {
    /// Tiny configuration used by gradient and equivalence tests.
    pub fn miniature() -> Self {
        Self {
            transformer: TransformerConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                gating: Gating::None,
                positional: Positional::LearnedAbsolute,
                concat_layer_outputs: false,
                max_len: 32,
            },
            latent: LatentDims { groups: 4, classes: 4 },
            net: NetConfig { image_size: 8, n_actions: 3, cnn_depth: 4, embed_dim: 16, mlp_hidden: 16 },
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.latent.validate()?;
        self.loss.validate()?;
        if self.net.n_actions == 0 {
            return Err(contract("n_actions must be positive"));
        }
        Ok(())
    }

    pub fn max_context(&self) -> usize {
        self.transformer.max_len
    }
}

impl Default for TssmConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig {
                n_layers: 6,
                n_heads: 10,
                d_model: 200,
                d_ff: 400,
                gating: Gating::IdentityMapReordering,
                positional: Positional::LearnedAbsolute,
                concat_layer_outputs: true,
                max_len: 101,
            },
            latent: LatentDims { groups: 32, classes: 32 },
            net: NetConfig { image_size: 64, n_actions: 3, cnn_depth: 32, embed_dim: 512, mlp_hidden: 200 },
            loss: LossConfig::default(),
        }
    }
}

/// Running state of step-by-step filtering over one trajectory.
#[derive(Clone, Debug)]
pub struct TssmFilter {
    cache: Option<KvSnapshot>,
    prev_z: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Tssm {
    pub config: TssmConfig,
    params: ParamSet,
    encoder: ConvEncoder,
    posterior: Mlp,
    token_in: Linear,
    start: ParamId,
    transformer: Transformer,
    prior: Mlp,
    heads: Heads,
}

impl Tssm {
    pub fn new(config: TssmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let net = config.net;
        let gc = config.latent.flat();
        let d = config.transformer.d_model;
        let mut ps = ParamSet::new();
        let encoder = ConvEncoder::new(&mut ps, "encoder", net.image_size, net.cnn_depth, net.embed_dim, rng)?;
        let posterior = Mlp::new(&mut ps, "posterior", net.embed_dim, net.mlp_hidden, 1, gc, rng);
        let token_in = Linear::new(&mut ps, "token_in", gc + net.n_actions, d, rng);
        let start = ps.add("start_token", Tensor::from_fn([d], |_| rng.random_range(-0.1..0.1)));
        let transformer = Transformer::new(&mut ps, "transformer", config.transformer, rng)?;
        let h_dim = transformer.output_dim();
        let prior = Mlp::new(&mut ps, "prior", h_dim, net.mlp_hidden, 1, gc, rng);
        let heads = Heads::new(&mut ps, h_dim + gc, &net, rng)?;
        Ok(Self { config, params: ps, encoder, posterior, token_in, start, transformer, prior, heads })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn h_dim(&self) -> usize {
        self.transformer.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.h_dim() + self.config.latent.flat()
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    fn latent_shape(&self, n: usize) -> [usize; 3] {
        [n, self.config.latent.groups, self.config.latent.classes]
    }

    // ---- graph-level building blocks ----

    /// `[n, s, s, 3]` → `[n, embed_dim]`.
    pub fn encode_obs_g(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        self.encoder.forward(g, p, images)
    }

    /// `[n, s, s, 3]` → posterior logits `[n, G, C]`, one frame per row.
    pub fn posterior_logits_g(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        let n = g.shape(images)[0];
        let e = self.encode_obs_g(g, p, images)?;
        let l = self.posterior.forward(g, p, e);
        Ok(g.reshape(l, &self.latent_shape(n)))
    }

    /// `[n, h_dim]` → prior logits `[n, G, C]`.
    pub fn prior_logits_g(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        let n = g.shape(h)[0];
        let l = self.prior.forward(g, p, h);
        g.reshape(l, &self.latent_shape(n))
    }

    /// Embed `z` `[b, t, G·C]` with one-hot actions `[b, t, A]` into tokens `[b, t, d_model]`.
    fn tokens_g(&self, g: &mut Graph, p: &Bound, z: Var, a: Var) -> Var {
        let x = g.concat(&[z, a], 2);
        self.token_in.forward(g, p, x)
    }

    fn start_tokens(&self, g: &mut Graph, p: &Bound, b: usize) -> Var {
        let zero = g.constant(Tensor::zeros([b, 1, self.config.transformer.d_model]));
        g.add(zero, p.var(self.start))
    }

    /// Deterministic states `[b, t, h_dim]` for posterior samples `z`
    /// `[b, t, G·C]` and per-frame actions (`b·t`, action that led to each frame).
    /// Also returns the cache after the last position.
    pub fn deterministic_states_g(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        actions: &[usize],
    ) -> Result<(Var, KvCache)> {
        let s = g.shape(z).to_vec();
        let gc = self.config.latent.flat();
        if s.len() != 3 || s[2] != gc || actions.len() != s[0] * s[1] {
            return Err(contract(format!("z must be [b, t, {gc}] with b·t actions, got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        if t == 0 {
            return Err(contract("deterministic states of an empty sequence"));
        }
        let start = self.start_tokens(g, p, b);
        let tokens = if t > 1 {
            let a = action_one_hot(actions, self.config.net.n_actions).reshape([b, t, self.config.net.n_actions]);
            let a = g.constant(a);
            let a_next = g.narrow(a, 1, 1, t - 1);
            let z_prev = g.narrow(z, 1, 0, t - 1);
            let rest = self.tokens_g(g, p, z_prev, a_next);
            g.concat(&[start, rest], 1)
        } else {
            start
        };
        self.transformer.forward(g, p, tokens)
    }

    /// Deterministic states computed one position at a time through the
    /// attention cache: `z` `[b, t, G·C]`, actions `b·t` → `[b, t, h_dim]`.
    pub fn deterministic_states_sequential(&self, z: &Tensor, actions: &[usize]) -> Result<Tensor> {
        let s = z.shape().to_vec();
        let gc = self.config.latent.flat();
        if s.len() != 3 || s[2] != gc || actions.len() != s[0] * s[1] {
            return Err(contract(format!("z must be [b, t, {gc}] with b·t actions, got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let n_actions = self.config.net.n_actions;
        let hd = self.h_dim();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let zv = g.constant(z.clone());
        let av = g.constant(action_one_hot(actions, n_actions).reshape([b, t, n_actions]));
        let mut cache = KvCache::empty();
        let mut out = vec![0.0; b * t * hd];
        for step in 0..t {
            let token = if step == 0 {
                self.start_tokens(&mut g, &p, b)
            } else {
                let zp = g.narrow(zv, 1, step - 1, 1);
                let a = g.narrow(av, 1, step, 1);
                self.tokens_g(&mut g, &p, zp, a)
            };
            let h = self.transformer.step(&mut g, &p, token, &mut cache)?;
            let hv = g.value(h).data();
            for bi in 0..b {
                out[(bi * t + step) * hd..(bi * t + step + 1) * hd].copy_from_slice(&hv[bi * hd..(bi + 1) * hd]);
            }
        }
        Ok(Tensor::new([b, t, hd], out))
    }

    /// Sample straight-through latents from logits `[n, G, C]`; returns `[n, G·C]`.
    fn sample_latent(&self, g: &mut Graph, logits: Var, rng: &mut StreamRng) -> Result<Var> {
        let n = g.shape(logits)[0];
        let (z, _) = straight_through_sample(g, logits, rng)?;
        Ok(g.reshape(z, &[n, self.config.latent.flat()]))
    }

    /// Negative ELBO of `batch`, averaged over valid steps.
    pub fn world_model_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &EpisodeBatch,
        rng: &mut StreamRng,
    ) -> Result<LossVars> {
        if batch.image_size != self.config.net.image_size {
            return Err(contract(format!(
                "batch images are {0}x{0}, model expects {1}x{1}",
                batch.image_size, self.config.net.image_size
            )));
        }
        let (b, t) = (batch.batch, batch.steps);
        let n = b * t;
        let gc = self.config.latent.flat();
        let s = batch.image_size;
        let images = g.constant(batch.images.clone().reshape([n, s, s, 3]));
        let post = self.posterior_logits_g(g, p, images)?;
        let z = self.sample_latent(g, post, rng)?;
        let z3 = g.reshape(z, &[b, t, gc]);
        let (h, _) = self.deterministic_states_g(g, p, z3, &batch.actions)?;
        let h = g.reshape(h, &[n, self.h_dim()]);
        let prior = self.prior_logits_g(g, p, h);
        let feat = g.concat(&[h, z], 1);
        assemble_loss(g, p, &self.heads, &self.config.loss, feat, post, prior, batch)
    }

    // ---- value-level operations ----

    fn check_frame(&self, image: &Tensor) -> Result<()> {
        let s = self.config.net.image_size;
        if image.shape() != [s, s, 3] {
            return Err(contract(format!("expected a [{s}, {s}, 3] frame, got {:?}", image.shape())));
        }
        Ok(())
    }

    pub fn encode_obs(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.check_frame(image)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let s = self.config.net.image_size;
        let x = g.constant(image.clone().reshape([1, s, s, 3]));
        let e = self.encode_obs_g(&mut g, &p, x)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Posterior over `z` given a single frame.
    pub fn posterior_logits(&self, image: &Tensor) -> Result<CategoricalLatent> {
        self.check_frame(image)?;
        let s = self.config.net.image_size;
        let logits = self.posterior_logits_frames(&image.clone().reshape([1, s, s, 3]))?;
        CategoricalLatent::from_logits(logits.reshape([self.config.latent.groups, self.config.latent.classes]))
    }

    /// Posterior logits `[n, G, C]` for frames `[n, s, s, 3]`.
    pub fn posterior_logits_frames(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(frames.clone());
        let l = self.posterior_logits_g(&mut g, &p, x)?;
        Ok(g.value(l).clone())
    }

    /// `z` `[b, t, G·C]`, actions `b·t`, prefix `mask` `b·t` → `h` `[b, t, h_dim]`.
    /// Entries at masked steps are computed but meaningless.
    pub fn deterministic_states(&self, z: &Tensor, actions: &[usize], mask: &[f64]) -> Result<Tensor> {
        if mask.len() != actions.len() {
            return Err(contract("mask length does not match actions"));
        }
        let t = z.shape().get(1).copied().unwrap_or(0);
        if t > 0 && mask.chunks(t).any(|row| row.windows(2).any(|w| w[1] > w[0])) {
            return Err(contract("mask is not a prefix mask"));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let zv = g.constant(z.clone());
        let (h, _) = self.deterministic_states_g(&mut g, &p, zv, actions)?;
        Ok(g.value(h).clone())
    }

    pub fn prior_logits(&self, h: &[f64]) -> Result<CategoricalLatent> {
        if h.len() != self.h_dim() {
            return Err(contract(format!("h has {} entries, expected {}", h.len(), self.h_dim())));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let hv = g.constant(Tensor::new([1, h.len()], h.to_vec()));
        let l = self.prior_logits_g(&mut g, &p, hv);
        CategoricalLatent::from_logits(
            g.value(l).clone().reshape([self.config.latent.groups, self.config.latent.classes]),
        )
    }

    /// Image mean `[s, s, 3]`, reward mean and continuation probability for state `(h, z)`.
    pub fn predict_heads(&self, h: &[f64], z: &[f64]) -> Result<(Tensor, f64, f64)> {
        if h.len() != self.h_dim() || z.len() != self.config.latent.flat() {
            return Err(contract("state does not match the model's dimensions"));
        }
        let mut f = h.to_vec();
        f.extend_from_slice(z);
        Ok(self.heads.predict(&self.params, &f))
    }

    /// Posterior states for every valid step of every row of `batch`.
    pub fn observe_filter(&self, batch: &EpisodeBatch, rng: &mut StreamRng) -> Result<Vec<Vec<WorldModelState>>> {
        let mut out = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let t = batch.valid_len(b);
            if t == 0 {
                out.push(Vec::new());
                continue;
            }
            let frames = batch.frames(b, 0, t);
            let actions = &batch.actions[b * batch.steps..b * batch.steps + t];
            let (states, _) = self.observe_sequence(&frames, actions, rng)?;
            out.push(states);
        }
        Ok(out)
    }

    /// Filter frames `[t, s, s, 3]`; returns states and the cache snapshot.
    fn observe_sequence(
        &self,
        frames: &Tensor,
        actions: &[usize],
        rng: &mut StreamRng,
    ) -> Result<(Vec<WorldModelState>, KvSnapshot)> {
        let t = frames.shape()[0];
        let gc = self.config.latent.flat();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(frames.clone());
        let post = self.posterior_logits_g(&mut g, &p, x)?;
        let probs = g.softmax(post);
        let z = sample_one_hot(g.value(probs), rng).reshape([1, t, gc]);
        let zv = g.constant(z.clone());
        let (h, cache) = self.deterministic_states_g(&mut g, &p, zv, actions)?;
        let hd = self.h_dim();
        let hv = g.value(h);
        let states = (0..t)
            .map(|i| WorldModelState {
                h: hv.data()[i * hd..(i + 1) * hd].to_vec(),
                z: z.data()[i * gc..(i + 1) * gc].to_vec(),
                is_posterior: true,
            })
            .collect();
        Ok((states, KvSnapshot::capture(&g, &cache)))
    }

    pub fn filter_begin(&self) -> TssmFilter {
        TssmFilter { cache: None, prev_z: None }
    }

    /// Extend the filter with the next frame and the action that led to it.
    pub fn filter_step(
        &self,
        state: &mut TssmFilter,
        image: &Tensor,
        action: usize,
        rng: &mut StreamRng,
    ) -> Result<WorldModelState> {
        self.check_frame(image)?;
        let s = self.config.net.image_size;
        let gc = self.config.latent.flat();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let mut cache = match &state.cache {
            Some(snap) => snap.restore(&mut g),
            None => KvCache::empty(),
        };
        let token = match &state.prev_z {
            None => self.start_tokens(&mut g, &p, 1),
            Some(z) => {
                let zv = g.constant(Tensor::new([1, 1, gc], z.clone()));
                let a = action_one_hot(&[action], self.config.net.n_actions).reshape([1, 1, self.config.net.n_actions]);
                let av = g.constant(a);
                self.tokens_g(&mut g, &p, zv, av)
            }
        };
        let h = self.transformer.step(&mut g, &p, token, &mut cache)?;
        let x = g.constant(image.clone().reshape([1, s, s, 3]));
        let post = self.posterior_logits_g(&mut g, &p, x)?;
        let probs = g.softmax(post);
        let z = sample_one_hot(g.value(probs), rng).into_data();
        state.cache = Some(KvSnapshot::capture(&g, &cache));
        state.prev_z = Some(z.clone());
        Ok(WorldModelState { h: g.value(h).data().to_vec(), z, is_posterior: true })
    }

    /// Imagine `horizon` steps from the last state of `ctx`.
    ///
    /// With `forced`, the prior samples are replaced by the given latents.
    /// With absolute positions the context is cut from the front so that it
    /// and the imagined steps fit in `max_context`.
    #[allow(clippy::too_many_arguments)]
    pub fn imagine_rollout(
        &self,
        g: &mut Graph,
        p: &Bound,
        ctx: &Context,
        policy: &mut dyn LatentPolicy,
        horizon: usize,
        forced: Option<&[Vec<f64>]>,
        rng: &mut StreamRng,
    ) -> Result<Imagined> {
        if ctx.is_empty() || ctx.actions.len() != ctx.len() {
            return Err(contract("imagination needs a non-empty context with one action per frame"));
        }
        if let Some(f) = forced {
            if f.len() < horizon {
                return Err(contract("fewer forced latents than imagined steps"));
            }
        }
        let gc = self.config.latent.flat();
        let keep = match self.config.transformer.positional {
            Positional::LearnedAbsolute => ctx.len().min(self.config.max_context().saturating_sub(horizon)),
            Positional::Relative => ctx.len(),
        };
        if keep == 0 {
            return Err(contract(format!(
                "horizon {horizon} leaves no room for context within max_context {}",
                self.config.max_context()
            )));
        }
        let from = ctx.len() - keep;
        let zs: Vec<f64> = ctx.zs[from..].iter().flatten().copied().collect();
        let zv = g.constant(Tensor::new([1, keep, gc], zs));
        let (h_all, mut cache) = self.deterministic_states_g(g, p, zv, &ctx.actions[from..])?;
        let hd = self.h_dim();
        let h_last = g.narrow(h_all, 1, keep - 1, 1);
        let mut h = g.reshape(h_last, &[1, hd]);
        let mut z = g.constant(Tensor::new([1, gc], ctx.zs[ctx.len() - 1].clone()));

        let mut out = Imagined {
            features: Vec::with_capacity(horizon + 1),
            hs: vec![h],
            zs: vec![z],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            continues: Vec::with_capacity(horizon),
        };
        let f0 = g.concat(&[h, z], 1);
        out.features.push(f0);
        for tau in 0..horizon {
            let feat = *out.features.last().expect("start state");
            let a = policy.act(g, feat, rng)?;
            let z3 = g.reshape(z, &[1, 1, gc]);
            let a3 = g.reshape(a, &[1, 1, self.config.net.n_actions]);
            let token = self.tokens_g(g, p, z3, a3);
            let h_next = self.transformer.step(g, p, token, &mut cache)?;
            h = g.reshape(h_next, &[1, hd]);
            z = match forced {
                Some(f) => g.constant(Tensor::new([1, gc], f[tau].clone())),
                None => {
                    let logits = self.prior_logits_g(g, p, h);
                    self.sample_latent(g, logits, rng)?
                }
            };
            let feat = g.concat(&[h, z], 1);
            let r = self.heads.reward(g, p, feat);
            let c = self.heads.discount_logit(g, p, feat);
            let c = g.sigmoid(c);
            out.actions.push(a);
            out.hs.push(h);
            out.zs.push(z);
            out.features.push(feat);
            out.rewards.push(r);
            out.continues.push(c);
        }
        Ok(out)
    }

    /// Condition on frames `[c, s, s, 3]` and generate steps `c..actions.len()`
    /// from prior samples driven by the recorded `actions`.
    pub fn open_loop_generate(&self, context: &Tensor, actions: &[usize], rng: &mut StreamRng) -> Result<OpenLoop> {
        let c = context.shape().first().copied().unwrap_or(0);
        let total = actions.len();
        if c == 0 || c >= total {
            return Err(contract(format!("context length {c} must lie in 1..{total}")));
        }
        let gc = self.config.latent.flat();
        let hd = self.h_dim();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(context.clone());
        let post = self.posterior_logits_g(&mut g, &p, x)?;
        let probs = g.softmax(post);
        let z_ctx = sample_one_hot(g.value(probs), rng).reshape([1, c, gc]);
        let mut z_prev = z_ctx.data()[(c - 1) * gc..].to_vec();
        let zv = g.constant(z_ctx);
        let (_, mut cache) = self.deterministic_states_g(&mut g, &p, zv, &actions[..c])?;

        let n_actions = self.config.net.n_actions;
        let mut feats = Vec::with_capacity(total - c);
        let mut states = Vec::with_capacity(total - c);
        for &a in &actions[c..] {
            let zt = g.constant(Tensor::new([1, 1, gc], z_prev.clone()));
            let at = g.constant(action_one_hot(&[a], n_actions).reshape([1, 1, n_actions]));
            let token = self.tokens_g(&mut g, &p, zt, at);
            let h = self.transformer.step(&mut g, &p, token, &mut cache)?;
            let h = g.reshape(h, &[1, hd]);
            let logits = self.prior_logits_g(&mut g, &p, h);
            let pr = g.softmax(logits);
            let z = sample_one_hot(g.value(pr), rng).into_data();
            let zc = g.constant(Tensor::new([1, gc], z.clone()));
            feats.push(g.concat(&[h, zc], 1));
            states.push(WorldModelState { h: g.value(h).data().to_vec(), z: z.clone(), is_posterior: false });
            z_prev = z;
        }
        let feat = g.concat(&feats, 0);
        let img = self.heads.image(&mut g, &p, feat);
        let r = self.heads.reward(&mut g, &p, feat);
        let cl = self.heads.discount_logit(&mut g, &p, feat);
        let cont = g.sigmoid(cl);
        Ok(OpenLoop {
            images: g.value(img).clone(),
            rewards: g.value(r).data().to_vec(),
            continues: g.value(cont).data().to_vec(),
            states,
        })
    }
}
