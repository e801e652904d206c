//! Grouped categorical latents: softmax, straight-through sampling and KL.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// A `G × C` block of independent categorical distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalLatent {
    logits: Tensor,
    probs: Tensor,
    sample: Option<Tensor>,
}

impl CategoricalLatent {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.ndim() != 2 {
            return Err(contract(format!("latent logits must be [G, C], got {:?}", logits.shape())));
        }
        let (g, c) = (logits.shape()[0], logits.shape()[1]);
        if g < 1 || c < 2 {
            return Err(contract(format!("latent needs G >= 1 and C >= 2, got {g}x{c}")));
        }
        let probs = softmax_groups(&logits)?;
        Ok(Self { logits, probs, sample: None })
    }

    pub fn groups(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn sample(&self) -> Option<&Tensor> {
        self.sample.as_ref()
    }

    /// Draw a one-hot sample per group.
    pub fn draw(&mut self, rng: &mut impl Rng) -> &Tensor {
        self.sample = Some(sample_one_hot(&self.probs, rng));
        self.sample.as_ref().unwrap()
    }

    /// The sample flattened to a `G·C` vector.
    pub fn flat_sample(&self) -> Option<Vec<f64>> {
        self.sample.as_ref().map(|s| s.data().to_vec())
    }
}

/// Row-wise softmax over the last axis of any-rank logits.
pub fn softmax_groups(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(Error::NumericDomain("non-finite logits".into()));
    }
    let d = logits.last_dim();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    Ok(Tensor::new(logits.shape().to_vec(), out))
}

/// Inverse-CDF draw of one class per row of `probs`.
pub fn sample_index(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_positive
}

/// One-hot draw per row of `probs` (last axis = classes).
pub fn sample_one_hot(probs: &Tensor, rng: &mut impl Rng) -> Tensor {
    let d = probs.last_dim();
    let mut out = vec![0.0; probs.numel()];
    for (r, row) in probs.data().chunks(d).enumerate() {
        out[r * d + sample_index(row, rng)] = 1.0;
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Softmax over the last axis of `logits`, then a straight-through one-hot
/// sample. Returns `(sample, probs)`.
pub fn straight_through_sample(g: &mut Graph, logits: Var, rng: &mut impl Rng) -> Result<(Var, Var)> {
    if !g.value(logits).is_finite() {
        return Err(Error::NumericDomain("non-finite logits".into()));
    }
    let probs = g.softmax(logits);
    let sample = sample_one_hot(g.value(probs), rng);
    Ok((g.straight_through(probs, sample), probs))
}

/// `Σ_groups Σ_c q ln(q / p)` with both probabilities floored at [`PROB_FLOOR`] inside the logs.
pub fn kl_categorical(q: &CategoricalLatent, p: &CategoricalLatent) -> Result<f64> {
    if q.logits.shape() != p.logits.shape() {
        return Err(contract(format!("KL shape mismatch: {:?} vs {:?}", q.logits.shape(), p.logits.shape())));
    }
    Ok(q.probs
        .data()
        .iter()
        .zip(p.probs.data())
        .map(|(&qi, &pi)| qi * (qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()))
        .sum())
}

/// KL between two probability tensors `[.., G, C]`, summed over the last two axes.
pub fn kl_probs(g: &mut Graph, q: Var, p: Var) -> Var {
    let lq = g.clamp_min(q, PROB_FLOOR);
    let lq = g.ln(lq);
    let lp = g.clamp_min(p, PROB_FLOOR);
    let lp = g.ln(lp);
    let d = g.sub(lq, lp);
    let terms = g.mul(q, d);
    let per_group = g.sum_last(terms);
    g.sum_last(per_group)
}

/// KL with balanced gradients, from logits `[.., G, C]`.
///
/// The value equals `KL(q ‖ p)`. The gradient reaching the prior is `beta`
/// times that of `KL(sg(q) ‖ p)`; the gradient reaching the posterior is
/// `1 - beta` times that of `KL(q ‖ sg(p))`.
pub fn kl_balanced(g: &mut Graph, q_logits: Var, p_logits: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(contract(format!("kl_balance must lie in [0, 1], got {beta}")));
    }
    if g.shape(q_logits) != g.shape(p_logits) {
        return Err(contract(format!("KL shape mismatch: {:?} vs {:?}", g.shape(q_logits), g.shape(p_logits))));
    }
    if g.shape(q_logits).len() < 2 {
        return Err(contract("KL logits need [.., G, C]"));
    }
    let q = g.softmax(q_logits);
    let p = g.softmax(p_logits);
    let q_sg = g.detach(q);
    let p_sg = g.detach(p);
    let prior_side = kl_probs(g, q_sg, p);
    let post_side = kl_probs(g, q, p_sg);
    let a = g.scale(prior_side, beta);
    let b = g.scale(post_side, 1.0 - beta);
    Ok(g.add(a, b))
}
