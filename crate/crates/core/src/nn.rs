//! Parameterized layers built on the autodiff tape.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Bound, Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_glorot(format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros([d_out]));
        Self { w, b: Some(b), d_in, d_out }
    }

    pub fn no_bias(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_glorot(format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
        Self { w, b: None, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// Learned gain and bias after a parameter-free normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gain = ps.add(format!("{name}.g"), Tensor::full([d], 1.0));
        let bias = ps.add(format!("{name}.b"), Tensor::zeros([d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let s = g.mul(n, p.var(self.gain));
        g.add(s, p.var(self.bias))
    }
}

/// ELU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        hidden: usize,
        n_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_hidden + 1);
        let mut d = d_in;
        for i in 0..n_hidden {
            layers.push(Linear::new(ps, &format!("{name}.l{i}"), d, hidden, rng));
            d = hidden;
        }
        layers.push(Linear::new(ps, &format!("{name}.out"), d, d_out, rng));
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i < last {
                h = g.elu(h);
            }
        }
        h
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

/// Number of stride-2 halvings from `size` down to 4, if `size = 4·2^k` with `k ≥ 1`.
pub fn image_levels(size: usize) -> Option<usize> {
    if size < 8 || size % 4 != 0 || !(size / 4).is_power_of_two() {
        return None;
    }
    Some((size / 4).trailing_zeros() as usize)
}

/// Strided convolutional encoder for square channels-last RGB images.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    convs: Vec<(ParamId, ParamId)>,
    head: Linear,
    pub image_size: usize,
    pub embed_dim: usize,
}

impl ConvEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        image_size: usize,
        depth: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let levels = image_levels(image_size)
            .ok_or_else(|| contract(format!("image size {image_size} must be 4·2^k with k >= 1")))?;
        let mut convs = Vec::with_capacity(levels);
        let mut c_in = 3;
        for i in 0..levels {
            let c_out = depth << i;
            let w = ps.add_glorot(format!("{name}.conv{i}.w"), &[c_out, c_in, 4, 4], c_in * 16, c_out * 16, rng);
            let b = ps.add(format!("{name}.conv{i}.b"), Tensor::zeros([c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        let head = Linear::new(ps, &format!("{name}.head"), c_in * 16, embed_dim, rng);
        Ok(Self { convs, head, image_size, embed_dim })
    }

    /// `images`: `[n, size, size, 3]` → `[n, embed_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.image_size || s[2] != self.image_size || s[3] != 3 {
            return Err(contract(format!("encoder expects [n, {0}, {0}, 3] images, got {s:?}", self.image_size)));
        }
        let mut h = g.permute(images, &[0, 3, 1, 2]);
        for &(w, b) in &self.convs {
            h = g.conv2d(h, p.var(w), 2, 1);
            h = g.add_channel_bias(h, p.var(b));
            h = g.elu(h);
        }
        let n = s[0];
        let flat = g.shape(h)[1..].iter().product::<usize>();
        let h = g.reshape(h, &[n, flat]);
        let e = self.head.forward(g, p, h);
        Ok(g.elu(e))
    }
}

/// Transposed-convolution decoder producing the mean of a unit-variance
/// Gaussian over channels-last RGB images.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    stem: Linear,
    deconvs: Vec<(ParamId, ParamId)>,
    stem_channels: usize,
    pub image_size: usize,
}

impl ConvDecoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        image_size: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let levels = image_levels(image_size)
            .ok_or_else(|| contract(format!("image size {image_size} must be 4·2^k with k >= 1")))?;
        let stem_channels = depth << (levels - 1);
        let stem = Linear::new(ps, &format!("{name}.stem"), d_in, stem_channels * 16, rng);
        let mut deconvs = Vec::with_capacity(levels);
        let mut c_in = stem_channels;
        for i in 0..levels {
            let c_out = if i + 1 == levels { 3 } else { c_in / 2 };
            let w = ps.add_glorot(format!("{name}.deconv{i}.w"), &[c_in, c_out, 4, 4], c_in * 16, c_out * 16, rng);
            let b = ps.add(format!("{name}.deconv{i}.b"), Tensor::zeros([c_out]));
            deconvs.push((w, b));
            c_in = c_out;
        }
        Ok(Self { stem, deconvs, stem_channels, image_size })
    }

    /// `features`: `[n, d_in]` → `[n, size, size, 3]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        let n = g.shape(features)[0];
        let h = self.stem.forward(g, p, features);
        let mut h = g.reshape(h, &[n, self.stem_channels, 4, 4]);
        for &(w, b) in &self.deconvs {
            h = g.elu(h);
            h = g.conv_transpose2d(h, p.var(w), 2, 1);
            h = g.add_channel_bias(h, p.var(b));
        }
        g.permute(h, &[0, 2, 3, 1])
    }
}
