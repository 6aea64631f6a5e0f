//! Patch-transformer image encoders, the text encoder, EMA and the
//! content/style combination.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::{masked_mean, EncoderBlock, Init, LayerNorm, Linear, ParamStore};
use crate::rng::Rng;
use crate::synth::Vocab;

/// Stacks images into a `[B, n_patches, patch * patch * 3]` tensor.
pub fn images_to_patches(images: &[&ImageBuffer], patch: usize, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (gw, gh) = first.check_patch_grid(patch)?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend(img.to_patches(patch)?);
    }
    let t = Tensor::from_vec(data, (images.len(), gw * gh, patch * patch * 3), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// Linear patch embedding, learned positions, pre-norm blocks, final norm,
/// mean pooling.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    embed: Linear,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
}

#[allow(clippy::too_many_arguments)]
impl PatchEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_dim: usize,
        n_patches: usize,
        d: usize,
        heads: usize,
        layers: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embed = Linear::new(store, &format!("{name}.patch"), patch_dim, d, true, std, rng)?;
        let pos = store.param(&format!("{name}.pos"), &[n_patches, d], Init::Normal(std), rng)?;
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.blocks.{i}"), d, heads, std, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d, rng)?;
        Ok(Self {
            embed,
            pos,
            blocks,
            ln_f,
        })
    }

    /// `[B, N, P]` patches to (`[B, N, d]` tokens, `[B, d]` pooled).
    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, n, _) = patches.dims3()?;
        if n != self.pos.dim(0)? {
            return Err(Error::Shape(format!(
                "encoder expects {} patches, got {n}",
                self.pos.dim(0)?
            )));
        }
        let mut x = self.embed.forward(patches)?.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let tokens = self.ln_f.forward(&x)?;
        let pooled = tokens.mean(1)?;
        Ok((tokens, pooled))
    }
}

/// A padded batch of token sequences with their lengths.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Tensor,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(seqs: &[Vec<u32>]) -> Result<Self> {
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut p = s.clone();
                p.resize(max_len, Vocab::PAD);
                p
            })
            .collect();
        let lengths = seqs.iter().map(Vec::len).collect::<Vec<_>>();
        Self::from_padded(&padded, &lengths)
    }

    /// Rows must share one length; entries past `lengths[b]` are ignored.
    pub fn from_padded(rows: &[Vec<u32>], lengths: &[usize]) -> Result<Self> {
        let max_len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != max_len) || rows.len() != lengths.len() {
            return Err(Error::Shape("ragged or empty text batch".into()));
        }
        if lengths.contains(&0) {
            return Err(Error::Invalid("empty token sequence has nothing to pool".into()));
        }
        let flat: Vec<u32> = rows.iter().flatten().copied().collect();
        Ok(Self {
            ids: Tensor::from_vec(flat, (rows.len(), max_len), &Device::Cpu)?,
            lengths: lengths.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    tok: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
}

#[allow(clippy::too_many_arguments)]
impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_tokens: usize,
        d: usize,
        heads: usize,
        layers: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let tok = store.param(&format!("{name}.tok"), &[vocab, d], Init::Normal(std), rng)?;
        let pos = store.param(&format!("{name}.pos"), &[max_tokens, d], Init::Normal(std), rng)?;
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.blocks.{i}"), d, heads, std, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d, rng)?;
        Ok(Self {
            tok,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Token states `[B, L, d]` and the masked mean `q_j` `[B, d]`.
    pub fn forward(&self, text: &TextBatch) -> Result<(Tensor, Tensor)> {
        let (b, l) = text.ids.dims2()?;
        let vocab = self.tok.dim(0)?;
        if l > self.pos.dim(0)? {
            return Err(Error::Shape(format!(
                "sequence of {l} tokens exceeds the {} token limit",
                self.pos.dim(0)?
            )));
        }
        let max_id = text.ids.max_all()?.to_scalar::<u32>()?;
        if max_id as usize >= vocab {
            return Err(Error::Invalid(format!("token id {max_id} outside vocabulary of {vocab}")));
        }
        let d = self.tok.dim(1)?;
        let emb = self
            .tok
            .index_select(&text.ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        let mut x = emb.broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&text.lengths))?;
        }
        let states = self.ln_f.forward(&x)?;
        let pooled = masked_mean(&states, &text.lengths)?;
        Ok((states, pooled))
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.tok
    }
}

/// `target <- tau * target + (1 - tau) * online`, elementwise and in place.
pub fn ema_update(target: &Var, online: &Var, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("EMA decay {tau} outside [0, 1]")));
    }
    if target.dims() != online.dims() {
        return Err(Error::Shape(format!(
            "EMA target {:?} vs online {:?}",
            target.dims(),
            online.dims()
        )));
    }
    let blended = (target.as_tensor().detach().affine(tau, 0.0)?
        + online.as_tensor().detach().affine(1.0 - tau, 0.0)?)?;
    target.set(&blended)?;
    Ok(())
}

/// `q_i = q_c + alpha * q_s`.
pub fn combine_visual(q_c: &Tensor, q_s: &Tensor, alpha: f64) -> Result<Tensor> {
    if q_c.dims() != q_s.dims() {
        return Err(Error::Shape(format!(
            "content {:?} vs style {:?}",
            q_c.dims(),
            q_s.dims()
        )));
    }
    Ok((q_c + q_s.affine(alpha, 0.0)?)?)
}
