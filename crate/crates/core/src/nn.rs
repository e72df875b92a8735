//! Layers built on the tape: linear maps, layer norm and a pre-norm
//! transformer encoder layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Var;
use crate::error::Result;
use crate::optim::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = Tensor::from_fn([in_dim, out_dim], |_| rng.random_range(-bound..bound));
        let weight = store.insert(format!("{name}/weight"), w)?;
        let bias = store.insert(format!("{name}/bias"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[self.weight])?.add(p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}/gamma"), Tensor::full([dim], 1.0))?,
            beta: store.insert(format!("{name}/beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gamma], p[self.beta])
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}/query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}/key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}/value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}/output"), dim, dim, rng)?,
            heads,
        })
    }

    /// Self-attention over `x` of shape `[batch, tokens, dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (batch, tokens, dim) = (shape[0], shape[1], shape[2]);
        let head_dim = dim / self.heads;
        let split = |v: Var<'t>| -> Result<Var<'t>> {
            v.reshape([batch, tokens, self.heads, head_dim])?
                .permute(&[0, 2, 1, 3])?
                .reshape([batch * self.heads, tokens, head_dim])
        };
        let q = split(self.query.forward(p, x)?)?;
        let k = split(self.key.forward(p, x)?)?;
        let v = split(self.value.forward(p, x)?)?;
        let weights = q
            .bmm(k, true)?
            .scale(1.0 / (head_dim as f64).sqrt())
            .softmax();
        let mixed = weights
            .bmm(v, false)?
            .reshape([batch, self.heads, tokens, head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape([batch, tokens, dim])?;
        self.output.forward(p, mixed)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `h + ff(ln(h))`.
/// With `pre_norm == false` the normalization moves after each residual sum.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub pre_norm: bool,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        pre_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}/attn_norm"), dim)?,
            attention: MultiHeadAttention::new(store, &format!("{name}/attn"), dim, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}/ff_norm"), dim)?,
            ff_in: Linear::new(store, &format!("{name}/ff_in"), dim, ff_dim, rng)?,
            ff_out: Linear::new(store, &format!("{name}/ff_out"), ff_dim, dim, rng)?,
            pre_norm,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let ff = |h: Var<'t>| -> Result<Var<'t>> {
            self.ff_out
                .forward(p, self.ff_in.forward(p, h)?.leaky_relu())
        };
        if self.pre_norm {
            let h = x.add(self.attention.forward(p, self.attn_norm.forward(p, x)?)?)?;
            h.add(ff(self.ff_norm.forward(p, h)?)?)
        } else {
            let h = self
                .attn_norm
                .forward(p, x.add(self.attention.forward(p, x)?)?)?;
            self.ff_norm.forward(p, h.add(ff(h)?)?)
        }
    }
}
