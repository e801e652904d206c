//! Causal multi-head transformer over per-step tokens.
//!
//! Two evaluation paths share parameters: [`Transformer::forward`] runs a
//! whole sequence at once under a causal mask, and [`Transformer::step`]
//! appends one token to a key/value cache. Both produce the same outputs up to
//! floating-point reassociation.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Bound, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;
/// Bias subtracted inside the update gate so gated layers start close to identity.
const GATE_BIAS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    /// Post-norm residual blocks.
    None,
    /// Pre-norm residual blocks with a ReLU on each sublayer output.
    IdentityMapReordering,
    /// Pre-norm blocks whose residual connection is replaced by a GRU-style gate.
    GruGate,
}

impl Gating {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "identity_map_reordering" => Some(Self::IdentityMapReordering),
            "gru_gate" => Some(Self::GruGate),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::IdentityMapReordering => "identity_map_reordering",
            Self::GruGate => "gru_gate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    /// A learned vector per absolute position, added to the input tokens.
    LearnedAbsolute,
    /// Sinusoidal distance encodings projected per layer, with learned
    /// content and position biases on the queries.
    Relative,
}

impl Positional {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned_absolute" => Some(Self::LearnedAbsolute),
            "relative" => Some(Self::Relative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LearnedAbsolute => "learned_absolute",
            Self::Relative => "relative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub gating: Gating,
    pub positional: Positional,
    pub concat_layer_outputs: bool,
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(contract("n_layers must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(contract(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(contract("d_ff and max_len must be positive"));
        }
        Ok(())
    }

    /// Width of the per-step output.
    pub fn output_dim(&self) -> usize {
        if self.concat_layer_outputs {
            self.n_layers * self.d_model
        } else {
            self.d_model
        }
    }
}

/// Sinusoidal encoding of each distance in `distances`, shape `[len, dim]`.
pub fn sinusoid_table(distances: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(distances.len() * dim);
    for &d in distances {
        for k in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / dim as f64);
            let a = d as f64 * freq;
            data.push(if k % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new([distances.len(), dim], data)
}

fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn([t, t], |i| if i % t > i / t { MASKED } else { 0.0 })
}

#[derive(Clone, Debug)]
struct GruGateLayer {
    wr: Linear,
    ur: Linear,
    wz: Linear,
    uz: Linear,
    wg: Linear,
    ug: Linear,
}

impl GruGateLayer {
    fn new(ps: &mut ParamSet, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |s: &str| Linear::no_bias(ps, &format!("{name}.{s}"), d, d, rng);
        Self { wr: lin("wr"), ur: lin("ur"), wz: lin("wz"), uz: lin("uz"), wg: lin("wg"), ug: lin("ug") }
    }

    /// Combine residual stream `x` with sublayer output `y`.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, y: Var) -> Var {
        let a = self.wr.forward(g, p, y);
        let b = self.ur.forward(g, p, x);
        let r = g.add(a, b);
        let r = g.sigmoid(r);
        let a = self.wz.forward(g, p, y);
        let b = self.uz.forward(g, p, x);
        let z = g.add(a, b);
        let z = g.add_scalar(z, -GATE_BIAS);
        let z = g.sigmoid(z);
        let rx = g.mul(r, x);
        let a = self.wg.forward(g, p, y);
        let b = self.ug.forward(g, p, rx);
        let c = g.add(a, b);
        let c = g.tanh(c);
        // x + z·(c − x) == (1 − z)·x + z·c
        let d = g.sub(c, x);
        let zd = g.mul(z, d);
        g.add(x, zd)
    }
}

#[derive(Clone, Debug)]
struct RelativeParams {
    u: ParamId,
    v: ParamId,
    wr: Linear,
}

#[derive(Clone, Debug)]
struct Layer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    gates: Option<(GruGateLayer, GruGateLayer)>,
    rel: Option<RelativeParams>,
}

/// Per-layer attention keys and values for the tokens seen so far,
/// each `[batch, heads, len, head_dim]`.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub len: usize,
    pub layers: Vec<(Var, Var)>,
}

impl KvCache {
    pub fn empty() -> Self {
        Self { len: 0, layers: Vec::new() }
    }
}

/// Keys and values of a cache as plain arrays, for carrying a cache across graphs.
#[derive(Clone, Debug)]
pub struct KvSnapshot {
    pub len: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl KvSnapshot {
    pub fn capture(g: &Graph, cache: &KvCache) -> Self {
        let layers = cache.layers.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        Self { len: cache.len, layers }
    }

    pub fn restore(&self, g: &mut Graph) -> KvCache {
        let layers = self.layers.iter().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone()))).collect();
        KvCache { len: self.len, layers }
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    layers: Vec<Layer>,
    pos: Option<ParamId>,
}

impl Transformer {
    pub fn new(ps: &mut ParamSet, name: &str, config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let pos = match config.positional {
            Positional::LearnedAbsolute => Some(
                ps.add(format!("{name}.pos"), Tensor::from_fn([config.max_len, d], |_| rng.random_range(-0.1..0.1))),
            ),
            Positional::Relative => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let n = format!("{name}.layer{i}");
            let wq = Linear::new(ps, &format!("{n}.wq"), d, d, rng);
            // A key bias only shifts every score in a row equally, so it would get no gradient.
            let wk = Linear::no_bias(ps, &format!("{n}.wk"), d, d, rng);
            let wv = Linear::new(ps, &format!("{n}.wv"), d, d, rng);
            let wo = Linear::new(ps, &format!("{n}.wo"), d, d, rng);
            let ln1 = LayerNorm::new(ps, &format!("{n}.ln1"), d);
            let ln2 = LayerNorm::new(ps, &format!("{n}.ln2"), d);
            let ff1 = Linear::new(ps, &format!("{n}.ff1"), d, config.d_ff, rng);
            let ff2 = Linear::new(ps, &format!("{n}.ff2"), config.d_ff, d, rng);
            let gates = (config.gating == Gating::GruGate).then(|| {
                (
                    GruGateLayer::new(ps, &format!("{n}.gate1"), d, rng),
                    GruGateLayer::new(ps, &format!("{n}.gate2"), d, rng),
                )
            });
            let rel = (config.positional == Positional::Relative).then(|| RelativeParams {
                u: ps.add(format!("{n}.rel_u"), Tensor::zeros([d])),
                v: ps.add(format!("{n}.rel_v"), Tensor::zeros([d])),
                wr: Linear::no_bias(ps, &format!("{n}.rel_w"), d, d, rng),
            });
            layers.push(Layer { wq, wk, wv, wo, ln1, ln2, ff1, ff2, gates, rel });
        }
        Ok(Self { config, layers, pos })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Causal pass over `tokens` `[batch, t, d_model]`. Returns per-step
    /// outputs `[batch, t, output_dim]` and the cache for continuing the sequence.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, KvCache)> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(contract(format!("transformer expects [b, t, {}] tokens, got {s:?}", self.config.d_model)));
        }
        let t = s[1];
        self.check_len(t)?;
        let mut x = tokens;
        if let Some(pos) = self.pos {
            let pv = p.var(pos);
            let rows = g.narrow(pv, 0, 0, t);
            x = g.add(x, rows);
        }
        let mask = causal_mask(t);
        let rel_table = (self.config.positional == Positional::Relative)
            .then(|| sinusoid_table(&(0..t).collect::<Vec<_>>(), self.config.d_model));
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cache = KvCache { len: t, layers: Vec::with_capacity(self.layers.len()) };
        for layer in &self.layers {
            let (y, kv) = self.layer_forward(g, p, layer, x, None, Some(&mask), rel_table.as_ref());
            cache.layers.push(kv);
            outputs.push(y);
            x = y;
        }
        Ok((self.collect(g, &outputs), cache))
    }

    /// Append one token `[batch, 1, d_model]` to `cache`; returns the new
    /// step's output `[batch, 1, output_dim]`.
    pub fn step(&self, g: &mut Graph, p: &Bound, token: Var, cache: &mut KvCache) -> Result<Var> {
        let s = g.shape(token).to_vec();
        if s.len() != 3 || s[1] != 1 || s[2] != self.config.d_model {
            return Err(contract(format!("transformer step expects [b, 1, {}], got {s:?}", self.config.d_model)));
        }
        let pos_idx = cache.len;
        self.check_len(pos_idx + 1)?;
        if pos_idx > 0 && cache.layers.len() != self.layers.len() {
            return Err(contract("cache does not match the layer count"));
        }
        let mut x = token;
        if let Some(pos) = self.pos {
            let pv = p.var(pos);
            let row = g.narrow(pv, 0, pos_idx, 1);
            x = g.add(x, row);
        }
        // Keys are in position order, so key j sits at distance pos_idx − j.
        let rel_table = (self.config.positional == Positional::Relative)
            .then(|| sinusoid_table(&(0..=pos_idx).rev().collect::<Vec<_>>(), self.config.d_model));
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut new_layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let past = (pos_idx > 0).then(|| cache.layers[i]);
            let (y, kv) = self.layer_forward(g, p, layer, x, past, None, rel_table.as_ref());
            new_layers.push(kv);
            outputs.push(y);
            x = y;
        }
        cache.layers = new_layers;
        cache.len = pos_idx + 1;
        Ok(self.collect(g, &outputs))
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if self.config.positional == Positional::LearnedAbsolute && t > self.config.max_len {
            return Err(contract(format!(
                "sequence length {t} exceeds max_context {} with absolute positions",
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn collect(&self, g: &mut Graph, outputs: &[Var]) -> Var {
        if self.config.concat_layer_outputs && outputs.len() > 1 {
            g.concat(outputs, 2)
        } else {
            *outputs.last().expect("at least one layer")
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: &Layer,
        x: Var,
        past: Option<(Var, Var)>,
        mask: Option<&Tensor>,
        rel_table: Option<&Tensor>,
    ) -> (Var, (Var, Var)) {
        match self.config.gating {
            Gating::None => {
                let (a, kv) = self.attention(g, p, layer, x, past, mask, rel_table);
                let y = g.add(x, a);
                let y = layer.ln1.forward(g, p, y);
                let f = self.feed_forward(g, p, layer, y);
                let o = g.add(y, f);
                (layer.ln2.forward(g, p, o), kv)
            }
            Gating::IdentityMapReordering | Gating::GruGate => {
                let n = layer.ln1.forward(g, p, x);
                let (a, kv) = self.attention(g, p, layer, n, past, mask, rel_table);
                let a = g.relu(a);
                let y = match &layer.gates {
                    Some((g1, _)) => g1.forward(g, p, x, a),
                    None => g.add(x, a),
                };
                let n = layer.ln2.forward(g, p, y);
                let f = self.feed_forward(g, p, layer, n);
                let f = g.relu(f);
                let o = match &layer.gates {
                    Some((_, g2)) => g2.forward(g, p, y, f),
                    None => g.add(y, f),
                };
                (o, kv)
            }
        }
    }

    fn feed_forward(&self, g: &mut Graph, p: &Bound, layer: &Layer, x: Var) -> Var {
        let h = layer.ff1.forward(g, p, x);
        let h = g.relu(h);
        layer.ff2.forward(g, p, h)
    }

    /// `[b, t, d]` → `[b, heads, t, head_dim]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let nh = self.config.n_heads;
        let r = g.reshape(x, &[s[0], s[1], nh, s[2] / nh]);
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Multi-head attention for queries `x` `[b, tq, d]`. With `past`, the new
    /// keys are appended to it; `mask` is applied to `[tq, tk]` scores.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: &Layer,
        x: Var,
        past: Option<(Var, Var)>,
        mask: Option<&Tensor>,
        rel_table: Option<&Tensor>,
    ) -> (Var, (Var, Var)) {
        let s = g.shape(x).to_vec();
        let (b, tq, d) = (s[0], s[1], s[2]);
        let nh = self.config.n_heads;
        let dh = d / nh;
        let q = layer.wq.forward(g, p, x);
        let k = layer.wk.forward(g, p, x);
        let v = layer.wv.forward(g, p, x);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let (k, v) = match past {
            Some((pk, pv)) => (g.concat(&[pk, k], 2), g.concat(&[pv, v], 2)),
            None => (k, v),
        };
        let tk = g.shape(k)[2];
        let kt = g.transpose(k);

        let scores = match (&layer.rel, rel_table) {
            (Some(rel), Some(table)) => {
                let qu = g.add(q, p.var(rel.u));
                let qu = self.split_heads(g, qu);
                let content = g.matmul(qu, kt);
                let qv = g.add(q, p.var(rel.v));
                let qv = self.split_heads(g, qv);
                // Projected distance encodings, one column per table row: [heads, dh, rows].
                let tab = g.constant(table.clone());
                let r = rel.wr.forward(g, p, tab);
                let rows = table.shape()[0];
                let r = g.reshape(r, &[rows, nh, dh]);
                let r = g.permute(r, &[1, 2, 0]);
                // Fold batch into the query axis so the product batches over heads.
                let qv = g.permute(qv, &[1, 0, 2, 3]);
                let qv = g.reshape(qv, &[nh, b * tq, dh]);
                let pos = g.matmul(qv, r);
                let pos = g.reshape(pos, &[nh, b, tq, rows]);
                let pos = g.permute(pos, &[1, 0, 2, 3]);
                // Full pass: rows are indexed by distance and need gathering;
                // cached step: rows are already in key order.
                let pos = if mask.is_some() { g.rel_gather(pos) } else { pos };
                g.add(content, pos)
            }
            _ => {
                let qh = self.split_heads(g, q);
                g.matmul(qh, kt)
            }
        };
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = match mask {
            Some(m) => g.add_const(scores, m),
            None => scores,
        };
        let attn = g.softmax(scores);
        let o = g.matmul(attn, v);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, tq, d]);
        debug_assert_eq!(g.shape(attn)[3], tk);
        (layer.wo.forward(g, p, o), (k, v))
    }
}
