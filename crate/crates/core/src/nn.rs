//! Transformer building blocks on top of [`crate::autograd`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{math, Error, Result};

/// Value added to masked attention scores.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), Tensor::glorot(in_dim, out_dim, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, n) = g.dims(x);
        if n != self.in_dim {
            return Err(Error::Dimension(format!(
                "linear `{}` expects width {}, got {:?}",
                store.name(self.weight),
                self.in_dim,
                g.shape(x)
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), Tensor::from_fn(&[dim], |_| 1.0))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product attention with an output projection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by num_heads {num_heads}"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng)?,
            num_heads,
            d_model,
        })
    }

    /// With `causal`, query `i` only sees keys `j <= i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries_in: Var,
        keys_values_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, queries_in)?;
        let k = self.key.forward(g, store, keys_values_in)?;
        let v = self.value.forward(g, store, keys_values_in)?;
        let (lq, _) = g.dims(q);
        let (lk, _) = g.dims(k);
        let head_dim = self.d_model / self.num_heads;
        let scale = 1.0 / math::sqrt(head_dim as f64);
        let mask = causal.then(|| {
            let m = Tensor::from_fn(&[lq, lk], |idx| if idx % lk > idx / lk { MASKED } else { 0.0 });
            g.constant(&m)
        });
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(mask) = mask {
                scores = g.add(scores, mask)?;
            }
            let weights = g.softmax(scores, 1)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.output.forward(g, store, joined)
    }
}

/// Two-layer position-wise network.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, width, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), width, d_model, rng)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        self.outer.forward(g, store, h)
    }
}

/// Pre-norm bidirectional encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        num_heads: usize,
        ff_width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, num_heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ff_width, activation, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.attn_norm.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n, false)?;
        let x = g.add(x, a)?;
        let n = self.ff_norm.forward(g, store, x)?;
        let f = self.ff.forward(g, store, n)?;
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        let err = MultiHeadAttention::new(&mut store, "a", 10, 3, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_key_gives_projected_value_everywhere() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(&Tensor::normal(&[4, 8], 1.0, &mut rng));
        let kv = g.constant(&Tensor::normal(&[1, 8], 1.0, &mut rng));
        let out = mha.forward(&mut g, &store, q, kv, false).unwrap();
        let v = g.value(out).to_vec();
        for r in 1..4 {
            for c in 0..8 {
                assert!((v[r * 8 + c] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_first_row_ignores_later_rows() {
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
        let x1 = Tensor::normal(&[3, 8], 1.0, &mut rng);
        let mut x2 = x1.clone();
        for v in &mut x2.values_mut()[8..] {
            *v += 3.0;
        }
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = mha.forward(&mut g, &store, xv, xv, true).unwrap();
            g.value(out)[..8].to_vec()
        };
        assert_eq!(run(&x1), run(&x2));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let x = g.zeros(&[1, 4]);
        assert!(matches!(lin.forward(&mut g, &store, x), Err(Error::Dimension(_))));
    }
}
