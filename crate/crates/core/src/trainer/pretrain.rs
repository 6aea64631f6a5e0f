//! Masked-token pretraining of the text encoder on the description corpus.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::AppRecord;
use crate::model::{group, ModelConfig, TextBatch, TextEncoder};
use crate::nn::{log_softmax_rows, Linear, ParamStore};
use crate::rng::{derive_rng, stream};
use crate::synth::{chunk_description, tokenize, Vocab};

use super::{scalar, AdamW, AdamWConfig, Checkpoint, META_MODEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            mask_prob: 0.15,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub seconds: f64,
}

/// Replaces a random subset of positions (at least one) with `<mask>`;
/// returns the corrupted ids and the masked positions.
fn corrupt(ids: &[u32], p: f64, rng: &mut crate::rng::Rng) -> (Vec<u32>, Vec<usize>) {
    let mut out = ids.to_vec();
    let mut picked: Vec<usize> = (0..ids.len()).filter(|_| rng.random_bool(p)).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(0..ids.len()));
    }
    for &i in &picked {
        out[i] = Vocab::MASK;
    }
    (out, picked)
}

/// Trains the text encoder with masked-token prediction and returns a
/// checkpoint holding only the `text.` parameters. With zero steps this is
/// the random initialisation.
pub fn pretrain_text(
    model_cfg: &ModelConfig,
    records: &[AppRecord],
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, PretrainReport)> {
    let start = Instant::now();
    if cfg.steps > 0 && records.is_empty() {
        return Err(Error::Invalid("no descriptions to pretrain on".into()));
    }
    let mut store = ParamStore::new(DType::F32);
    let rng = &mut derive_rng(cfg.seed, &[stream::PRETRAIN]);
    let encoder = TextEncoder::new(
        &mut store,
        "text",
        model_cfg.vocab,
        model_cfg.max_tokens,
        model_cfg.d,
        model_cfg.heads,
        model_cfg.text_layers,
        model_cfg.init_std,
        rng,
    )?;
    let head = Linear::new(&mut store, "mlm.out", model_cfg.d, model_cfg.vocab, true, model_cfg.init_std, rng)?;
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &[group::TEXT, "mlm."],
        &[],
    )?;
    let mut report = PretrainReport {
        first_loss: None,
        last_loss: None,
        seconds: 0.0,
    };
    for step in 0..cfg.steps {
        let mut seqs = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::new();
        for b in 0..cfg.batch {
            let rec = &records[rng.random_range(0..records.len())];
            let mut ids = tokenize(&chunk_description(&rec.description, rng));
            ids.truncate(model_cfg.max_tokens);
            if ids.is_empty() {
                return Err(Error::Invalid(format!("app {} has an empty description", rec.app_id)));
            }
            let (masked, positions) = corrupt(&ids, cfg.mask_prob, rng);
            targets.extend(positions.into_iter().map(|p| (b, p, ids[p])));
            seqs.push(masked);
        }
        let text = TextBatch::new(&seqs)?;
        let (states, _) = encoder.forward(&text)?;
        let (bsz, len, d) = states.dims3()?;
        let logits = head.forward(&states.reshape((bsz * len, d))?)?;
        let mut weights = vec![0f32; bsz * len * model_cfg.vocab];
        let w = 1.0 / targets.len() as f32;
        for &(b, p, id) in &targets {
            weights[(b * len + p) * model_cfg.vocab + id as usize] = w;
        }
        let weights = Tensor::from_vec(weights, (bsz * len, model_cfg.vocab), &Device::Cpu)?;
        let loss = (log_softmax_rows(&logits)? * weights)?.sum_all()?.neg()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let grads = loss.backward()?;
        opt.update(&store, &grads, cfg.lr)?;
        report.first_loss.get_or_insert(value);
        report.last_loss = Some(value);
        if step % 200 == 0 {
            log::info!("pretrain step {step} loss {value:.4}");
        }
    }
    let mut ckpt = Checkpoint::new();
    ckpt.insert_json(META_MODEL, model_cfg)?;
    ckpt.insert_json("meta.pretrain", cfg)?;
    for (name, var) in store.group(group::TEXT) {
        ckpt.insert_tensor(name, var.as_tensor())?;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((ckpt, report))
}
