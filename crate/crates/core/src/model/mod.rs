//! The full vision-language model: content encoder, online/target style
//! encoders, frozen text encoder, fusion stack and the contrastive scalars.

pub mod encoders;
pub mod fusion;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{self, LossVariant};
use crate::nn::{Init, ParamStore};
use crate::rng::{derive_rng, stream};
use crate::synth::{Vocab, MAX_TOKENS};

pub use encoders::{combine_visual, ema_update, images_to_patches, PatchEncoder, TextBatch, TextEncoder};
pub use fusion::{CrossBlock, Fusion, FusionOutput};

/// Parameter-group prefixes.
pub mod group {
    pub const CONTENT: &str = "content.";
    pub const STYLE_ONLINE: &str = "style_online.";
    pub const STYLE_TARGET: &str = "style_target.";
    pub const TEXT: &str = "text.";
    pub const FUSION: &str = "fusion.";
    pub const LOSS: &str = "loss.";
}

pub const LOG_T: &str = "loss.log_t";
pub const BIAS: &str = "loss.b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub content_layers: usize,
    pub style_layers: usize,
    pub text_layers: usize,
    pub fusion_blocks: usize,
    pub d_joint: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    /// Style encoder pair on; off is the content-only ablation.
    pub use_style: bool,
    /// Cross-attention on; off swaps each cross sublayer for self-attention.
    pub cross_attention: bool,
    pub alpha: f64,
    pub init_std: f64,
    pub init_t: f64,
    pub init_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            d: 64,
            heads: 4,
            content_layers: 2,
            style_layers: 2,
            text_layers: 2,
            fusion_blocks: 2,
            d_joint: 64,
            vocab: Vocab::standard().len(),
            max_tokens: MAX_TOKENS,
            use_style: true,
            cross_attention: true,
            alpha: 0.1,
            init_std: 0.02,
            init_t: 10.0,
            init_b: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d={}", self.heads, self.d)));
        }
        if self.init_t <= 0.0 {
            return Err(Error::Config("initial logit scale must be positive".into()));
        }
        Ok(())
    }
}

/// One batch of training pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// Content view `x_c`, `[B, N, P]`.
    pub content: Tensor,
    /// Masked style view `x_s'`.
    pub masked: Option<Tensor>,
    /// Unmasked style view `x_s`.
    pub target: Option<Tensor>,
    pub text: TextBatch,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Outputs of the stop-gradient branches, held fixed during a step.
#[derive(Debug, Clone)]
pub struct FrozenFeatures {
    pub text_states: Tensor,
    pub q_s: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub contrastive: Tensor,
    pub mse: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    content: PatchEncoder,
    style: Option<(PatchEncoder, PatchEncoder)>,
    text: TextEncoder,
    fusion: Fusion,
    log_t: Tensor,
    bias: Tensor,
}

impl Model {
    /// Builds the model over `store`, initialising any parameter the store
    /// does not already hold. The style target starts as a copy of the online
    /// branch.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut derive_rng(seed, &[stream::INIT]);
        let std = cfg.init_std;
        let content = PatchEncoder::new(
            store, "content", cfg.patch_dim(), cfg.n_patches(), cfg.d, cfg.heads, cfg.content_layers, std, rng,
        )?;
        let style = if cfg.use_style {
            let online = PatchEncoder::new(
                store, "style_online", cfg.patch_dim(), cfg.n_patches(), cfg.d, cfg.heads, cfg.style_layers, std, rng,
            )?;
            let online_names: Vec<String> = store.group(group::STYLE_ONLINE).map(|(k, _)| k.to_string()).collect();
            for name in online_names {
                let target = name.replacen(group::STYLE_ONLINE, group::STYLE_TARGET, 1);
                store.copy_of(&target, &name)?;
            }
            let target = PatchEncoder::new(
                store, "style_target", cfg.patch_dim(), cfg.n_patches(), cfg.d, cfg.heads, cfg.style_layers, std, rng,
            )?;
            Some((online, target))
        } else {
            None
        };
        let text = TextEncoder::new(store, "text", cfg.vocab, cfg.max_tokens, cfg.d, cfg.heads, cfg.text_layers, std, rng)?;
        let fusion = Fusion::new(
            store, "fusion", cfg.d, cfg.d_joint, cfg.heads, cfg.fusion_blocks, cfg.cross_attention, std, rng,
        )?;
        let log_t = store.param(LOG_T, &[], Init::Const(cfg.init_t.ln()), rng)?;
        let bias = store.param(BIAS, &[], Init::Const(cfg.init_b), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            content,
            style,
            text,
            fusion,
            log_t,
            bias,
        })
    }

    pub fn dtype(&self) -> DType {
        self.log_t.dtype()
    }

    pub fn content_encoder(&self) -> &PatchEncoder {
        &self.content
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn log_t(&self) -> &Tensor {
        &self.log_t
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Style vector from one branch. The target branch is evaluated under a
    /// gradient stop.
    pub fn encode_style(&self, patches: &Tensor, branch: StyleBranch) -> Result<Tensor> {
        let (online, target) = self
            .style
            .as_ref()
            .ok_or_else(|| Error::Invalid("model was built without a style encoder".into()))?;
        match branch {
            StyleBranch::Online => Ok(online.forward(patches)?.1),
            StyleBranch::Target => Ok(target.forward(patches)?.1.detach()),
        }
    }

    /// Runs the stop-gradient branches: frozen text states and the target style vector.
    pub fn frozen_features(&self, batch: &PairBatch) -> Result<FrozenFeatures> {
        let (text_states, _) = self.text.forward(&batch.text)?;
        let q_s = match (&self.style, &batch.target) {
            (Some(_), Some(target)) => Some(self.encode_style(target, StyleBranch::Target)?),
            (Some(_), None) => return Err(Error::Invalid("style model needs a target view".into())),
            (None, _) => None,
        };
        Ok(FrozenFeatures {
            text_states: text_states.detach(),
            q_s,
        })
    }

    /// Full training objective on one batch given its frozen features.
    pub fn loss(
        &self,
        batch: &PairBatch,
        frozen: &FrozenFeatures,
        variant: LossVariant,
        lambda: f64,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (tokens, q_c) = self.content.forward(&batch.content)?;
        let (q_i, mse) = match (&frozen.q_s, &batch.masked) {
            (Some(q_s), Some(masked)) => {
                let q_online = self.encode_style(masked, StyleBranch::Online)?;
                let mse = losses::mse_style_batch(q_s, &q_online)?;
                (combine_visual(&q_c, q_s, self.cfg.alpha)?, Some(mse))
            }
            (Some(_), None) => return Err(Error::Invalid("style model needs a masked view".into())),
            (None, _) => (q_c, None),
        };
        let out = self.fusion.fuse(
            &tokens,
            &q_i,
            &frozen.text_states,
            &batch.text.lengths,
            false,
        )?;
        let contrastive = match variant {
            LossVariant::SigCl => losses::sigcl(&out.z_img, &out.z_txt, &batch.labels, &self.log_t, &self.bias)?,
            LossVariant::UniCl => losses::unicl(&out.z_img, &out.z_txt, &batch.labels, &self.log_t)?,
            LossVariant::Sce => losses::sce(&out.z_img, &out.z_txt, &self.log_t)?,
        };
        let total = match &mse {
            Some(m) => losses::total_loss(&contrastive, m, lambda)?,
            None => contrastive.clone(),
        };
        Ok(LossParts {
            total,
            contrastive,
            mse,
        })
    }

    /// Inference embeddings: content and target-style vectors of the raw
    /// images, fused with the text.
    pub fn embed(&self, patches: &Tensor, text: &TextBatch) -> Result<FusionOutput> {
        self.embed_traced(patches, text, false)
    }

    /// As [`Model::embed`], also recording the cross-attention weights when `trace` is set.
    pub fn embed_traced(&self, patches: &Tensor, text: &TextBatch, trace: bool) -> Result<FusionOutput> {
        let (tokens, q_c) = self.content.forward(patches)?;
        let q_i = match &self.style {
            Some(_) => combine_visual(&q_c, &self.encode_style(patches, StyleBranch::Target)?, self.cfg.alpha)?,
            None => q_c,
        };
        let (states, _) = self.text.forward(text)?;
        self.fusion
            .fuse(&tokens, &q_i, &states, &text.lengths, trace)
    }

    /// Embeds images paired one-to-one with token sequences.
    pub fn embed_pairs(&self, images: &[&ImageBuffer], tokens: &[Vec<u32>]) -> Result<FusionOutput> {
        let patches = images_to_patches(images, self.cfg.patch, self.dtype())?;
        let text = TextBatch::new(tokens)?;
        self.embed(&patches, &text)
    }

    /// Post-softmax cross-attention `[heads, queries, keys]` of one pair.
    pub fn extract_attention(
        &self,
        image: &ImageBuffer,
        tokens: &[u32],
        layer: usize,
        side: AttentionSide,
    ) -> Result<Tensor> {
        if layer >= self.fusion.n_blocks() {
            return Err(Error::Invalid(format!(
                "layer {layer} out of range for {} fusion blocks",
                self.fusion.n_blocks()
            )));
        }
        let patches = images_to_patches(&[image], self.cfg.patch, self.dtype())?;
        let text = TextBatch::new(&[tokens.to_vec()])?;
        let out = self.embed_traced(&patches, &text, true)?;
        let trace = match side {
            AttentionSide::ImageToText => &out.image_attention,
            AttentionSide::TextToImage => &out.text_attention,
        };
        Ok(trace[layer].squeeze(0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleBranch {
    Online,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionSide {
    /// Image patches as queries over text tokens.
    ImageToText,
    /// Text tokens as queries over image patches.
    TextToImage,
}

/// EMA step of every style-target parameter toward its online twin.
pub fn ema_update_style(store: &ParamStore, tau: f64) -> Result<()> {
    for (name, target) in store.group(group::STYLE_TARGET) {
        let online_name = name.replacen(group::STYLE_TARGET, group::STYLE_ONLINE, 1);
        let online = store
            .get(&online_name)
            .ok_or_else(|| Error::Invalid(format!("no online twin for {name}")))?;
        ema_update(target, online, tau)?;
    }
    Ok(())
}
