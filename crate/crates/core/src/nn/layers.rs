use candle_core::{Tensor, D};

use super::fused;

use super::store::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.w"), &[d_in, d_out], Init::Normal(std), rng)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.b"), &[d_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if d_in != self.weight.dim(0)? {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {dims:?}",
                self.weight.dim(0)?
            )));
        }
        if let Some(b) = &self.bias {
            return fused::linear(x, &self.weight, b);
        }
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.g"), &[d], Init::Ones, rng)?,
            beta: store.param(&format!("{name}.b"), &[d], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Softmax over the last dimension with the row maximum held constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(sigmoid(x)) = -relu(-x) - log(1 + exp(-|x|))`, stable for any `x`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let soft = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.neg()?.relu()?.neg()? - soft)?)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean over the first `lengths[b]` rows of each `[B, L, d]` item.
pub fn masked_mean(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (b, l, _) = x.dims3()?;
    let mut w = Vec::with_capacity(b * l);
    for &len in lengths {
        w.extend((0..l).map(|j| if j < len { 1.0 / len as f64 } else { 0.0 }));
    }
    let w = Tensor::from_vec(w, (b, l, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&w)?.sum(1)?)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, true, std, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, true, std, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        gelu_ffn(&self.fc1, &self.fc2, x)
    }
}

pub fn gelu_ffn(fc1: &Linear, fc2: &Linear, x: &Tensor) -> Result<Tensor> {
    fc2.forward(&fused::gelu(&fc1.forward(x)?)?)
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value streams.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, std, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, std, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, std, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, std, rng)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// The value projection alone, `[.., d] -> [.., d]` before head split.
    pub fn value_projection(&self, x: &Tensor) -> Result<Tensor> {
        self.v.forward(x)
    }

    pub fn output_projection(&self, x: &Tensor) -> Result<Tensor> {
        self.o.forward(x)
    }

    fn check(&self, queries: &Tensor, memory: &Tensor) -> Result<()> {
        let (b, _, d) = queries.dims3()?;
        let (bm, _, dm) = memory.dims3()?;
        if bm != b || dm != d {
            return Err(Error::Shape(format!(
                "attention queries {:?} vs memory {:?}",
                queries.dims(),
                memory.dims()
            )));
        }
        Ok(())
    }

    /// Attended output `[B, Nq, d]`. Keys past `key_lengths[b]` are ignored.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor, key_lengths: Option<&[usize]>) -> Result<Tensor> {
        self.check(queries, memory)?;
        let q = self.q.forward(queries)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        let ctx = fused::attention(&q, &k, &v, self.heads, key_lengths)?;
        self.o.forward(&ctx)
    }

    /// Post-softmax weights `[B, H, Nq, Nk]` of [`Attention::forward`]; no gradient.
    pub fn weights(&self, queries: &Tensor, memory: &Tensor, key_lengths: Option<&[usize]>) -> Result<Tensor> {
        self.check(queries, memory)?;
        let q = self.q.forward(&queries.detach())?.detach();
        let k = self.k.forward(&memory.detach())?.detach();
        fused::attention_weights(&q, &k, self.heads, key_lengths)
    }
}

/// Pre-norm transformer encoder block with a GELU feed-forward of width 4d.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, std, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_lengths: Option<&[usize]>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = self.attn.forward(&h, &h, key_lengths)?;
        let x = (x + a)?;
        let f = self.ffn.forward(&self.ln2.forward(&x)?)?;
        Ok((x + f)?)
    }
}
