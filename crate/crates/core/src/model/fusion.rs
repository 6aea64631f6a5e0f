//! Two-stream cross-attention fusion producing the joint embeddings.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{l2_normalize, masked_mean, Attention, FeedForward, LayerNorm, Linear, ParamStore};
use crate::rng::Rng;

/// Self-attention, then attention into the other modality, then a
/// feed-forward, each as a pre-norm residual sublayer.
///
/// With `cross` disabled the second sublayer is another self-attention over
/// the block's own stream.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_mix: LayerNorm,
    mix: Attention,
    cross: bool,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Per-block attention weights `[B, H, Nq, Nk]` from the second sublayer.
pub type AttentionTrace = Vec<Tensor>;

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        cross: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mix_name = if cross { "cross" } else { "self2" };
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d, rng)?,
            self_attn: Attention::new(store, &format!("{name}.self"), d, heads, std, rng)?,
            ln_mix: LayerNorm::new(store, &format!("{name}.ln_{mix_name}"), d, rng)?,
            mix: Attention::new(store, &format!("{name}.{mix_name}"), d, heads, std, rng)?,
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, std, rng)?,
        })
    }

    pub fn is_cross(&self) -> bool {
        self.cross
    }

    pub fn cross_attention(&self) -> &Attention {
        &self.mix
    }

    /// Returns the updated own stream (same shape) and, when `trace` is set,
    /// the second-sublayer attention weights.
    pub fn forward(
        &self,
        own: &Tensor,
        own_lengths: Option<&[usize]>,
        memory: &Tensor,
        memory_lengths: Option<&[usize]>,
        trace: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let h = self.ln_self.forward(own)?;
        let a = self.self_attn.forward(&h, &h, own_lengths)?;
        let x = (own + a)?;
        let h = self.ln_mix.forward(&x)?;
        let (mem, mem_lengths) = if self.cross { (memory, memory_lengths) } else { (&h, own_lengths) };
        let c = self.mix.forward(&h, mem, mem_lengths)?;
        let weights = if trace { Some(self.mix.weights(&h, mem, mem_lengths)?) } else { None };
        let x = (x + c)?;
        let f = self.ffn.forward(&self.ln_ffn.forward(&x)?)?;
        Ok(((x + f)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    image_blocks: Vec<CrossBlock>,
    text_blocks: Vec<CrossBlock>,
    image_proj: Linear,
    text_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub z_img: Tensor,
    pub z_txt: Tensor,
    /// Image-to-text weights per block, `[B, H, n_patches, L]`; empty unless traced.
    pub image_attention: AttentionTrace,
    /// Text-to-image weights per block, `[B, H, L, n_patches]`; empty unless traced.
    pub text_attention: AttentionTrace,
}

impl Fusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_joint: usize,
        heads: usize,
        n_blocks: usize,
        cross: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let stack = |side: &str, rng: &mut Rng, store: &mut ParamStore| {
            (0..n_blocks)
                .map(|i| CrossBlock::new(store, &format!("{name}.{side}.{i}"), d, heads, cross, std, rng))
                .collect::<Result<Vec<_>>>()
        };
        let image_blocks = stack("image", rng, store)?;
        let text_blocks = stack("text", rng, store)?;
        Ok(Self {
            image_blocks,
            text_blocks,
            image_proj: Linear::new(store, &format!("{name}.image_proj"), d, d_joint, true, std, rng)?,
            text_proj: Linear::new(store, &format!("{name}.text_proj"), d, d_joint, true, std, rng)?,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.image_blocks.len()
    }

    pub fn image_blocks(&self) -> &[CrossBlock] {
        &self.image_blocks
    }

    /// Image tokens attend to text states and vice versa; each stream is
    /// pooled, the style-augmented `q_i` joins the image pool, and both are
    /// projected and L2-normalised.
    pub fn fuse(
        &self,
        image_tokens: &Tensor,
        q_i: &Tensor,
        text_states: &Tensor,
        text_lengths: &[usize],
        trace: bool,
    ) -> Result<FusionOutput> {
        let mut image_attention = Vec::new();
        let mut x = image_tokens.clone();
        for block in &self.image_blocks {
            let (y, w) = block.forward(&x, None, text_states, Some(text_lengths), trace)?;
            x = y;
            image_attention.extend(w);
        }
        let image_pool = (x.mean(1)? + q_i)?;
        let z_img = l2_normalize(&self.image_proj.forward(&image_pool)?)?;

        let mut text_attention = Vec::new();
        let mut y = text_states.clone();
        for block in &self.text_blocks {
            let (out, w) = block.forward(&y, Some(text_lengths), image_tokens, None, trace)?;
            y = out;
            text_attention.extend(w);
        }
        let text_pool = masked_mean(&y, text_lengths)?;
        let z_txt = l2_normalize(&self.text_proj.forward(&text_pool)?)?;

        Ok(FusionOutput {
            z_img,
            z_txt,
            image_attention,
            text_attention,
        })
    }
}
