//! Central-difference gradient verification of the full training objective.

use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::model::{group, images_to_patches, Model, ModelConfig, PairBatch, TextBatch, BIAS, LOG_T};
use crate::nn::ParamStore;
use crate::rng::{derive_rng, stream};
use crate::synth::{augment_image, describe, mask_patches, rating_of, render_image, tokenize, LatentFactors};

use super::scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub h: f64,
    pub n_params: usize,
    pub lambda: f64,
    pub loss: LossVariant,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                image_size: 16,
                patch: 4,
                d: 8,
                heads: 2,
                d_joint: 8,
                max_tokens: 32,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            batch: 4,
            h: 1e-4,
            n_params: 120,
            lambda: 5.0,
            loss: LossVariant::SigCl,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradEntry>,
    pub seconds: f64,
}

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn set_scalar(store: &ParamStore, name: &str, index: usize, value: f64) -> Result<()> {
    let var = store.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
    let mut flat: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
    flat[index] = value;
    var.set(&Tensor::from_vec(flat, var.dims(), var.device())?)?;
    Ok(())
}

fn get_scalar(store: &ParamStore, name: &str, index: usize) -> Result<f64> {
    let var = store.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
    Ok(var.as_tensor().flatten_all()?.get(index)?.to_scalar::<f64>()?)
}

/// Compares `grads` with central differences of `loss` at each
/// `(name, flat index)` of an f64 store. Parameters absent from `grads`
/// have an analytic gradient of zero.
pub fn finite_difference_check(
    store: &ParamStore,
    grads: &GradStore,
    samples: &[(String, usize)],
    h: f64,
    mut loss: impl FnMut() -> Result<f64>,
) -> Result<Vec<GradEntry>> {
    if store.dtype() != DType::F64 {
        return Err(Error::Invalid("gradient checks need f64 parameters".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (name, index) in samples {
        let var = store.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.get(*index)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        let x0 = get_scalar(store, name, *index)?;
        set_scalar(store, name, *index, x0 + h)?;
        let up = loss()?;
        set_scalar(store, name, *index, x0 - h)?;
        let down = loss()?;
        set_scalar(store, name, *index, x0)?;
        let numeric = (up - down) / (2.0 * h);
        out.push(GradEntry {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// A small labelled batch rendered at the model's image size.
pub fn toy_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<PairBatch> {
    let rng = &mut derive_rng(seed, &[stream::GRADCHECK]);
    let all: Vec<LatentFactors> = LatentFactors::all().collect();
    let mut content = Vec::new();
    let mut target = Vec::new();
    let mut masked = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        // Repeat the first latent so that the batch holds a shared-label pair.
        let latent = if i == 1 { all[0] } else { all[rng.random_range(0..all.len())] };
        let latent = if i == 0 { all[0] } else { latent };
        let img = render_image(&latent, cfg.image_size, rng);
        content.push(augment_image(&img, rng));
        let x_s = augment_image(&img, rng);
        masked.push(mask_patches(&x_s, cfg.patch, rng)?);
        target.push(x_s);
        let mut ids = tokenize(&describe(&latent, 2, rng));
        ids.truncate(cfg.max_tokens);
        tokens.push(ids);
        labels.push(rating_of(&latent).ordinal());
    }
    let refs = |v: &[crate::image::ImageBuffer]| images_to_patches(&v.iter().collect::<Vec<_>>(), cfg.patch, DType::F64);
    Ok(PairBatch {
        content: refs(&content)?,
        masked: cfg.use_style.then(|| refs(&masked)).transpose()?,
        target: cfg.use_style.then(|| refs(&target)).transpose()?,
        text: TextBatch::new(&tokens)?,
        labels,
    })
}

/// Samples parameters round-robin over the groups, uniformly within each,
/// always including the logit scale and bias.
pub fn sample_parameters(store: &ParamStore, n: usize, seed: u64) -> Vec<(String, usize)> {
    let rng = &mut derive_rng(seed, &[stream::GRADCHECK, 1]);
    let groups: Vec<Vec<(String, usize)>> = [
        group::CONTENT,
        group::STYLE_ONLINE,
        group::STYLE_TARGET,
        group::TEXT,
        group::FUSION,
    ]
    .iter()
    .map(|p| {
        store
            .group(p)
            .map(|(name, v)| (name.to_string(), v.elem_count()))
            .collect::<Vec<_>>()
    })
    .filter(|g| !g.is_empty())
    .collect();
    let mut out = vec![(LOG_T.to_string(), 0), (BIAS.to_string(), 0)];
    let mut k = 0;
    while out.len() < n.max(2) {
        let g = &groups[k % groups.len()];
        k += 1;
        let total: usize = g.iter().map(|(_, c)| c).sum();
        let mut r = rng.random_range(0..total);
        for (name, count) in g {
            if r < *count {
                out.push((name.clone(), r));
                break;
            }
            r -= count;
        }
    }
    out
}

/// Checks the full objective on a toy model in f64. Text states and the
/// target style vector are computed once and held fixed, so frozen
/// parameters have exactly zero finite-difference gradients.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut store = ParamStore::new(DType::F64);
    let model = Model::new(&cfg.model, &mut store, cfg.seed)?;
    let batch = toy_batch(&cfg.model, cfg.batch, cfg.seed)?;
    let frozen = model.frozen_features(&batch)?;
    let parts = model.loss(&batch, &frozen, cfg.loss, cfg.lambda)?;
    let grads = parts.total.backward()?;
    let samples = sample_parameters(&store, cfg.n_params, cfg.seed);
    let entries = finite_difference_check(&store, &grads, &samples, cfg.h, || {
        scalar(&model.loss(&batch, &frozen, cfg.loss, cfg.lambda)?.total)
    })?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gradient check of a saved model on a batch rendered at its dimensions.
pub fn grad_check_store(
    model: &Model,
    store: &ParamStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let batch = toy_batch(&model.cfg, cfg.batch, cfg.seed)?;
    let frozen = model.frozen_features(&batch)?;
    let grads = model.loss(&batch, &frozen, cfg.loss, cfg.lambda)?.total.backward()?;
    let samples = sample_parameters(store, cfg.n_params, cfg.seed);
    let entries = finite_difference_check(store, &grads, &samples, cfg.h, || {
        scalar(&model.loss(&batch, &frozen, cfg.loss, cfg.lambda)?.total)
    })?;
    Ok(GradCheckReport {
        max_rel_error: entries.iter().map(|e| e.rel_error).fold(0.0, f64::max),
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn linear_model_is_exact() {
        let mut store = ParamStore::new(DType::F64);
        let rng = &mut derive_rng(1, &[0]);
        let w = store.param("w", &[3], Init::Normal(1.0), rng).unwrap();
        let x = Tensor::new(&[0.5f64, -2.0, 3.0], &candle_core::Device::Cpu).unwrap();
        let f = || -> Result<Tensor> { Ok((&w * &x)?.sum_all()?) };
        let grads = f().unwrap().backward().unwrap();
        let samples: Vec<_> = (0..3).map(|i| ("w".to_string(), i)).collect();
        for h in [1e-6, 1e-2, 10.0] {
            let entries =
                finite_difference_check(&store, &grads, &samples, h, || scalar(&f()?)).unwrap();
            for e in entries {
                assert!(e.rel_error <= 1e-10, "{e:?}");
            }
        }
    }
}
