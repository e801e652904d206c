//! Recurrent state-space model baseline.
//!
//! `h_0` is zero and `h_t = gru(h_{t−1}, z_{t−1}, a_t)`, where `a_t` is the
//! action that led to frame `t`. The posterior over `z_t` sees `h_t` and the
//! frame, so it carries the whole history and must be computed step by step.

use rand::Rng;

use crate::categorical::{sample_one_hot, straight_through_sample, CategoricalLatent};
use crate::error::{contract, Result};
use crate::graph::{Bound, Graph, Var};
use crate::nn::{ConvEncoder, Linear, Mlp};
use crate::params::ParamSet;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::world_model::{
    action_one_hot, assemble_loss, Context, EpisodeBatch, Heads, Imagined, LatentDims, LatentPolicy, LossConfig,
    LossVars, NetConfig, OpenLoop, WorldModelState,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RssmConfig {
    pub d_hidden: usize,
    pub latent: LatentDims,
    pub net: NetConfig,
    pub loss: LossConfig,
}

impl RssmConfig {
    pub fn miniature() -> Self {
        Self {
            d_hidden: 16,
            latent: LatentDims { groups: 4, classes: 4 },
            net: NetConfig { image_size: 8, n_actions: 3, cnn_depth: 4, embed_dim: 16, mlp_hidden: 16 },
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 {
            return Err(contract("d_hidden must be at least 1"));
        }
        if self.net.n_actions == 0 {
            return Err(contract("n_actions must be positive"));
        }
        self.latent.validate()?;
        self.loss.validate()
    }
}

impl Default for RssmConfig {
    fn default() -> Self {
        Self {
            d_hidden: 200,
            latent: LatentDims { groups: 32, classes: 32 },
            net: NetConfig { image_size: 64, n_actions: 3, cnn_depth: 32, embed_dim: 512, mlp_hidden: 200 },
            loss: LossConfig::default(),
        }
    }
}

/// Running state of step-by-step filtering.
#[derive(Clone, Debug)]
pub struct RssmFilter {
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Rssm {
    pub config: RssmConfig,
    params: ParamSet,
    encoder: ConvEncoder,
    img_in: Linear,
    gru_x: Linear,
    gru_h: Linear,
    posterior: Mlp,
    prior: Mlp,
    heads: Heads,
}

impl Rssm {
    pub fn new(config: RssmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let net = config.net;
        let gc = config.latent.flat();
        let d = config.d_hidden;
        let mut ps = ParamSet::new();
        let encoder = ConvEncoder::new(&mut ps, "encoder", net.image_size, net.cnn_depth, net.embed_dim, rng)?;
        let img_in = Linear::new(&mut ps, "img_in", gc + net.n_actions, d, rng);
        let gru_x = Linear::new(&mut ps, "gru_x", d, 3 * d, rng);
        let gru_h = Linear::no_bias(&mut ps, "gru_h", d, 3 * d, rng);
        let posterior = Mlp::new(&mut ps, "posterior", d + net.embed_dim, net.mlp_hidden, 1, gc, rng);
        let prior = Mlp::new(&mut ps, "prior", d, net.mlp_hidden, 1, gc, rng);
        let heads = Heads::new(&mut ps, d + gc, &net, rng)?;
        Ok(Self { config, params: ps, encoder, img_in, gru_x, gru_h, posterior, prior, heads })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn h_dim(&self) -> usize {
        self.config.d_hidden
    }

    pub fn feature_dim(&self) -> usize {
        self.config.d_hidden + self.config.latent.flat()
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    fn latent_shape(&self, n: usize) -> [usize; 3] {
        [n, self.config.latent.groups, self.config.latent.classes]
    }

    // ---- graph-level building blocks ----

    /// One recurrent update: `h` `[n, d]`, `z` `[n, G·C]`, one-hot `a` `[n, A]` → `[n, d]`.
    pub fn gru_step_g(&self, g: &mut Graph, p: &Bound, h: Var, z: Var, a: Var) -> Var {
        let d = self.config.d_hidden;
        let x = g.concat(&[z, a], 1);
        let x = self.img_in.forward(g, p, x);
        let x = g.elu(x);
        let gx = self.gru_x.forward(g, p, x);
        let gh = self.gru_h.forward(g, p, h);
        let xr = g.narrow(gx, 1, 0, d);
        let hr = g.narrow(gh, 1, 0, d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let xu = g.narrow(gx, 1, d, d);
        let hu = g.narrow(gh, 1, d, d);
        let u = g.add(xu, hu);
        let u = g.sigmoid(u);
        let xc = g.narrow(gx, 1, 2 * d, d);
        let hc = g.narrow(gh, 1, 2 * d, d);
        let rhc = g.mul(r, hc);
        let c = g.add(xc, rhc);
        let c = g.tanh(c);
        // u·h + (1 − u)·c == c + u·(h − c)
        let hm = g.sub(h, c);
        let uh = g.mul(u, hm);
        g.add(c, uh)
    }

    /// `[n, s, s, 3]` → `[n, embed_dim]`.
    pub fn encode_obs_g(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        self.encoder.forward(g, p, images)
    }

    /// Posterior logits `[n, G, C]` from `h` `[n, d]` and embeddings `[n, E]`.
    pub fn posterior_logits_g(&self, g: &mut Graph, p: &Bound, h: Var, embed: Var) -> Var {
        let n = g.shape(h)[0];
        let x = g.concat(&[h, embed], 1);
        let l = self.posterior.forward(g, p, x);
        g.reshape(l, &self.latent_shape(n))
    }

    pub fn prior_logits_g(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        let n = g.shape(h)[0];
        let l = self.prior.forward(g, p, h);
        g.reshape(l, &self.latent_shape(n))
    }

    fn sample_latent(&self, g: &mut Graph, logits: Var, rng: &mut StreamRng) -> Result<Var> {
        let n = g.shape(logits)[0];
        let (z, _) = straight_through_sample(g, logits, rng)?;
        Ok(g.reshape(z, &[n, self.config.latent.flat()]))
    }

    /// Stack per-step `[b, x]` vars into `[b·t, x]` in `(b, t)` order.
    fn stack_time(g: &mut Graph, steps: &[Var]) -> Var {
        let s = g.shape(steps[0]).to_vec();
        let parts: Vec<Var> = steps.iter().map(|&v| g.reshape(v, &[s[0], 1, s[1]])).collect();
        let all = g.concat(&parts, 1);
        g.reshape(all, &[s[0] * steps.len(), s[1]])
    }

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
        let s = batch.image_size;
        let d = self.config.d_hidden;
        let e_dim = self.config.net.embed_dim;
        let n_actions = self.config.net.n_actions;
        let images = g.constant(batch.images.clone().reshape([b * t, s, s, 3]));
        let embed = self.encode_obs_g(g, p, images)?;
        let embed = g.reshape(embed, &[b, t, e_dim]);
        let actions = action_one_hot(&batch.actions, n_actions).reshape([b, t, n_actions]);
        let actions = g.constant(actions);

        let mut h = g.constant(Tensor::zeros([b, d]));
        let (mut hs, mut zs, mut posts, mut priors) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for step in 0..t {
            if step > 0 {
                let a = g.narrow(actions, 1, step, 1);
                let a = g.reshape(a, &[b, n_actions]);
                h = self.gru_step_g(g, p, h, *zs.last().expect("previous latent"), a);
            }
            let e = g.narrow(embed, 1, step, 1);
            let e = g.reshape(e, &[b, e_dim]);
            let post = self.posterior_logits_g(g, p, h, e);
            let z = self.sample_latent(g, post, rng)?;
            let prior = self.prior_logits_g(g, p, h);
            let gcn = self.config.latent.flat();
            posts.push(g.reshape(post, &[b, gcn]));
            priors.push(g.reshape(prior, &[b, gcn]));
            hs.push(h);
            zs.push(z);
        }
        let n = b * t;
        let h_all = Self::stack_time(g, &hs);
        let z_all = Self::stack_time(g, &zs);
        let post = Self::stack_time(g, &posts);
        let post = g.reshape(post, &self.latent_shape(n));
        let prior = Self::stack_time(g, &priors);
        let prior = g.reshape(prior, &self.latent_shape(n));
        let feat = g.concat(&[h_all, z_all], 1);
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

    pub fn gru_step(&self, h: &[f64], z: &[f64], action: usize) -> Result<Vec<f64>> {
        let d = self.config.d_hidden;
        let gc = self.config.latent.flat();
        if h.len() != d || z.len() != gc {
            return Err(contract("gru_step input sizes do not match the model"));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let hv = g.constant(Tensor::new([1, d], h.to_vec()));
        let zv = g.constant(Tensor::new([1, gc], z.to_vec()));
        let av = g.constant(action_one_hot(&[action], self.config.net.n_actions));
        let out = self.gru_step_g(&mut g, &p, hv, zv, av);
        Ok(g.value(out).data().to_vec())
    }

    pub fn rssm_posterior(&self, h: &[f64], image: &Tensor) -> Result<CategoricalLatent> {
        self.check_frame(image)?;
        let d = self.config.d_hidden;
        if h.len() != d {
            return Err(contract("h does not match d_hidden"));
        }
        let s = self.config.net.image_size;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(image.clone().reshape([1, s, s, 3]));
        let e = self.encode_obs_g(&mut g, &p, x)?;
        let hv = g.constant(Tensor::new([1, d], h.to_vec()));
        let l = self.posterior_logits_g(&mut g, &p, hv, e);
        CategoricalLatent::from_logits(
            g.value(l).clone().reshape([self.config.latent.groups, self.config.latent.classes]),
        )
    }

    pub fn prior_logits(&self, h: &[f64]) -> Result<CategoricalLatent> {
        if h.len() != self.h_dim() {
            return Err(contract("h does not match d_hidden"));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let hv = g.constant(Tensor::new([1, h.len()], h.to_vec()));
        let l = self.prior_logits_g(&mut g, &p, hv);
        CategoricalLatent::from_logits(
            g.value(l).clone().reshape([self.config.latent.groups, self.config.latent.classes]),
        )
    }

    pub fn predict_heads(&self, h: &[f64], z: &[f64]) -> Result<(Tensor, f64, f64)> {
        if h.len() != self.h_dim() || z.len() != self.config.latent.flat() {
            return Err(contract("state does not match the model's dimensions"));
        }
        let mut f = h.to_vec();
        f.extend_from_slice(z);
        Ok(self.heads.predict(&self.params, &f))
    }

    /// Sequential posterior filtering of every valid step of every row.
    pub fn observe_filter(&self, batch: &EpisodeBatch, rng: &mut StreamRng) -> Result<Vec<Vec<WorldModelState>>> {
        let mut out = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let t = batch.valid_len(b);
            let frames = batch.frames(b, 0, t);
            let actions = &batch.actions[b * batch.steps..b * batch.steps + t];
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let (states, _, _) = self.observe_g(&mut g, &p, &frames, actions, rng)?;
            out.push(states);
        }
        Ok(out)
    }

    /// Filter frames `[t, s, s, 3]`; returns the states plus the last `(h, z)` vars.
    fn observe_g(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &Tensor,
        actions: &[usize],
        rng: &mut StreamRng,
    ) -> Result<(Vec<WorldModelState>, Option<Var>, Option<Var>)> {
        let t = frames.shape()[0];
        let d = self.config.d_hidden;
        let gc = self.config.latent.flat();
        if t == 0 {
            return Ok((Vec::new(), None, None));
        }
        let x = g.constant(frames.clone());
        let embed = self.encode_obs_g(g, p, x)?;
        let mut h = g.constant(Tensor::zeros([1, d]));
        let mut z: Option<Var> = None;
        let mut states = Vec::with_capacity(t);
        for (step, &a) in actions.iter().enumerate().take(t) {
            if let Some(zp) = z {
                let av = g.constant(action_one_hot(&[a], self.config.net.n_actions));
                h = self.gru_step_g(g, p, h, zp, av);
            }
            let e = g.narrow(embed, 0, step, 1);
            let post = self.posterior_logits_g(g, p, h, e);
            let probs = g.softmax(post);
            let zs = sample_one_hot(g.value(probs), rng).reshape([1, gc]);
            states.push(WorldModelState { h: g.value(h).data().to_vec(), z: zs.data().to_vec(), is_posterior: true });
            z = Some(g.constant(zs));
        }
        Ok((states, Some(h), z))
    }

    pub fn filter_begin(&self) -> RssmFilter {
        RssmFilter { prev: None }
    }

    pub fn filter_step(
        &self,
        state: &mut RssmFilter,
        image: &Tensor,
        action: usize,
        rng: &mut StreamRng,
    ) -> Result<WorldModelState> {
        self.check_frame(image)?;
        let d = self.config.d_hidden;
        let h = match &state.prev {
            None => vec![0.0; d],
            Some((h, z)) => self.gru_step(h, z, action)?,
        };
        let post = self.rssm_posterior(&h, image)?;
        let z = sample_one_hot(post.probs(), rng).into_data();
        state.prev = Some((h.clone(), z.clone()));
        Ok(WorldModelState { h, z, is_posterior: true })
    }

    /// Replay the recurrence over a context's latents and actions; returns `h` of its last step.
    fn context_h(&self, g: &mut Graph, p: &Bound, ctx: &Context) -> Var {
        let d = self.config.d_hidden;
        let gc = self.config.latent.flat();
        let mut h = g.constant(Tensor::zeros([1, d]));
        for i in 1..ctx.len() {
            let z = g.constant(Tensor::new([1, gc], ctx.zs[i - 1].clone()));
            let a = g.constant(action_one_hot(&[ctx.actions[i]], self.config.net.n_actions));
            h = self.gru_step_g(g, p, h, z, a);
        }
        h
    }

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
        let mut h = self.context_h(g, p, ctx);
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
            h = self.gru_step_g(g, p, h, z, a);
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

    pub fn open_loop_generate(&self, context: &Tensor, actions: &[usize], rng: &mut StreamRng) -> Result<OpenLoop> {
        let c = context.shape().first().copied().unwrap_or(0);
        let total = actions.len();
        if c == 0 || c >= total {
            return Err(contract(format!("context length {c} must lie in 1..{total}")));
        }
        let gc = self.config.latent.flat();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let (_, h, z) = self.observe_g(&mut g, &p, context, &actions[..c], rng)?;
        let (mut h, mut z) = (h.expect("non-empty context"), z.expect("non-empty context"));
        let mut feats = Vec::with_capacity(total - c);
        let mut states = Vec::with_capacity(total - c);
        for &a in &actions[c..] {
            let av = g.constant(action_one_hot(&[a], self.config.net.n_actions));
            h = self.gru_step_g(&mut g, &p, h, z, av);
            let logits = self.prior_logits_g(&mut g, &p, h);
            let pr = g.softmax(logits);
            let zs = sample_one_hot(g.value(pr), rng).reshape([1, gc]);
            states.push(WorldModelState { h: g.value(h).data().to_vec(), z: zs.data().to_vec(), is_posterior: false });
            z = g.constant(zs);
            feats.push(g.concat(&[h, z], 1));
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
