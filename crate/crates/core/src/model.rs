//! A world model of either kind behind one interface.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph};
use crate::params::ParamSet;
use crate::rng::StreamRng;
use crate::rssm::{Rssm, RssmFilter};
use crate::tensor::Tensor;
use crate::tssm::{Tssm, TssmFilter};
use crate::world_model::{
    Context, EpisodeBatch, Heads, Imagined, LatentDims, LatentPolicy, LossBreakdown, LossConfig, LossVars, ModelKind,
    NetConfig, OpenLoop, WorldModelState,
};

#[derive(Clone, Debug)]
pub enum WorldModel {
    Tssm(Tssm),
    Rssm(Rssm),
}

#[derive(Clone, Debug)]
pub enum FilterState {
    Tssm(TssmFilter),
    Rssm(RssmFilter),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            WorldModel::Tssm($m) => $e,
            WorldModel::Rssm($m) => $e,
        }
    };
}

impl WorldModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Tssm(_) => ModelKind::Tssm,
            Self::Rssm(_) => ModelKind::Rssm,
        }
    }

    pub fn params(&self) -> &ParamSet {
        dispatch!(self, m => m.params())
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        dispatch!(self, m => m.params_mut())
    }

    pub fn latent(&self) -> LatentDims {
        dispatch!(self, m => m.config.latent)
    }

    pub fn net(&self) -> NetConfig {
        dispatch!(self, m => m.config.net)
    }

    pub fn loss_config(&self) -> LossConfig {
        dispatch!(self, m => m.config.loss)
    }

    pub fn h_dim(&self) -> usize {
        dispatch!(self, m => m.h_dim())
    }

    pub fn feature_dim(&self) -> usize {
        dispatch!(self, m => m.feature_dim())
    }

    /// Longest sequence the model accepts, if bounded.
    pub fn max_context(&self) -> Option<usize> {
        match self {
            Self::Tssm(m) => match m.config.transformer.positional {
                crate::transformer::Positional::LearnedAbsolute => Some(m.config.max_context()),
                crate::transformer::Positional::Relative => None,
            },
            Self::Rssm(_) => None,
        }
    }

    pub fn heads(&self) -> &Heads {
        dispatch!(self, m => m.heads())
    }

    pub fn world_model_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &EpisodeBatch,
        rng: &mut StreamRng,
    ) -> Result<LossVars> {
        dispatch!(self, m => m.world_model_loss(g, p, batch, rng))
    }

    /// Loss values and parameter gradients for one batch. A non-finite loss is an error.
    pub fn loss_and_grads(&self, batch: &EpisodeBatch, rng: &mut StreamRng) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = g.bind(self.params());
        let l = self.world_model_loss(&mut g, &p, batch, rng)?;
        let values = LossBreakdown::read(&g, &l);
        if !values.total.is_finite() {
            return Err(Error::NumericDomain(format!("world-model loss is not finite: {values:?}")));
        }
        Ok((values, g.backward(l.total).for_set(self.params())))
    }

    pub fn observe_filter(&self, batch: &EpisodeBatch, rng: &mut StreamRng) -> Result<Vec<Vec<WorldModelState>>> {
        dispatch!(self, m => m.observe_filter(batch, rng))
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
        dispatch!(self, m => m.imagine_rollout(g, p, ctx, policy, horizon, forced, rng))
    }

    pub fn open_loop_generate(&self, context: &Tensor, actions: &[usize], rng: &mut StreamRng) -> Result<OpenLoop> {
        dispatch!(self, m => m.open_loop_generate(context, actions, rng))
    }

    pub fn predict_heads(&self, h: &[f64], z: &[f64]) -> Result<(Tensor, f64, f64)> {
        dispatch!(self, m => m.predict_heads(h, z))
    }

    pub fn filter_begin(&self) -> FilterState {
        match self {
            Self::Tssm(m) => FilterState::Tssm(m.filter_begin()),
            Self::Rssm(m) => FilterState::Rssm(m.filter_begin()),
        }
    }

    /// Filter the next frame; `action` is the action that led to it
    /// (ignored for the first frame).
    pub fn filter_step(
        &self,
        state: &mut FilterState,
        image: &Tensor,
        action: usize,
        rng: &mut StreamRng,
    ) -> Result<WorldModelState> {
        match (self, state) {
            (Self::Tssm(m), FilterState::Tssm(s)) => m.filter_step(s, image, action, rng),
            (Self::Rssm(m), FilterState::Rssm(s)) => m.filter_step(s, image, action, rng),
            _ => Err(crate::error::contract("filter state belongs to a different model kind")),
        }
    }
}
