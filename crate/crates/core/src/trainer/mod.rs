//! Optimisation loop: AdamW with a warmup-cosine schedule, the EMA style
//! target, checkpoint persistence, text pretraining and gradient checking.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod pretrain;
pub mod schedule;

use std::path::PathBuf;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::model::{ema_update_style, group, Model, ModelConfig, PairBatch};
use crate::nn::ParamStore;

pub use checkpoint::{Checkpoint, Values};
pub use data::PairSource;
pub use gradcheck::{finite_difference_check, grad_check, GradCheckConfig, GradCheckReport, GradEntry};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{pretrain_text, PretrainConfig, PretrainReport};
pub use schedule::cosine_lr;

pub const META_MODEL: &str = "meta.model";
pub const META_TRAIN: &str = "meta.train";
pub const OPT_STEP: &str = "opt.step";
pub const ADAM_M: &str = "adam.m.";
pub const ADAM_V: &str = "adam.v.";

/// Groups updated by the optimizer.
pub const TRAINABLE: [&str; 4] = [group::CONTENT, group::STYLE_ONLINE, group::FUSION, group::LOSS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub loss: LossVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-5,
            lr_final: 1e-8,
            warmup_epochs: 10,
            epochs: 30,
            batch: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            alpha: 0.1,
            lambda: 5.0,
            ema_decay: 0.996,
            seed: 42,
            precision: Precision::F32,
            deterministic: true,
            loss: LossVariant::SigCl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.lambda < 0.0 || self.lr_base < 0.0 || self.lr_final < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lambda, learning rates and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitReport {
    /// Mean total loss of each epoch run in this call, keyed by epoch index.
    pub epoch_losses: Vec<(usize, f64)>,
    pub steps: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Stop once the step counter reaches this value.
    pub max_steps: Option<u64>,
    /// Write `epoch_{k}.ckpt` here after every completed epoch.
    pub epoch_dir: Option<PathBuf>,
}

/// Model, parameters and optimizer state.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: Model,
    pub opt: AdamW,
}

impl Trainer {
    /// Fresh initialisation. Text parameters are taken from `text` when given.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, text: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.precision.dtype());
        if let Some(ckpt) = text {
            let n = ckpt.load_into(&mut store, group::TEXT)?;
            if n == 0 {
                return Err(Error::Checkpoint("text checkpoint holds no text parameters".into()));
            }
            if let Ok(text_cfg) = ckpt.json::<ModelConfig>(META_MODEL) {
                if (text_cfg.d, text_cfg.heads, text_cfg.text_layers, text_cfg.vocab, text_cfg.max_tokens)
                    != (model_cfg.d, model_cfg.heads, model_cfg.text_layers, model_cfg.vocab, model_cfg.max_tokens)
                {
                    return Err(Error::Checkpoint("text checkpoint dimensions differ from the model".into()));
                }
            }
        }
        let mut model_cfg = model_cfg.clone();
        model_cfg.alpha = cfg.alpha;
        let model = Model::new(&model_cfg, &mut store, cfg.seed)?;
        let opt = AdamW::new(&store, cfg.adamw(), &TRAINABLE, &[group::LOSS])?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            opt,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = ckpt.json(META_TRAIN)?;
        let (store, model) = load_model(ckpt, cfg.precision.dtype())?;
        let mut opt = AdamW::new(&store, cfg.adamw(), &TRAINABLE, &[group::LOSS])?;
        opt.step = ckpt.u64(OPT_STEP)?;
        let dtype = store.dtype();
        for name in opt.trainable().to_vec() {
            opt.m.insert(name.clone(), ckpt.tensor(&format!("{ADAM_M}{name}"))?.to_dtype(dtype)?);
            opt.v.insert(name.clone(), ckpt.tensor(&format!("{ADAM_V}{name}"))?.to_dtype(dtype)?);
        }
        Ok(Self { cfg, store, model, opt })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert_json(META_MODEL, &self.model.cfg)?;
        c.insert_json(META_TRAIN, &self.cfg)?;
        c.insert_u64(OPT_STEP, self.opt.step)?;
        c.insert_store(&self.store)?;
        for (name, m) in &self.opt.m {
            c.insert_tensor(&format!("{ADAM_M}{name}"), m)?;
        }
        for (name, v) in &self.opt.v {
            c.insert_tensor(&format!("{ADAM_V}{name}"), v)?;
        }
        Ok(c)
    }

    /// Forward, backward, optimizer update, then the EMA step of the style target.
    pub fn step(&mut self, batch: &PairBatch, lr: f64) -> Result<StepStats> {
        if batch.len() < 2 {
            return Err(Error::Invalid("a training batch needs at least two pairs".into()));
        }
        let frozen = self.model.frozen_features(batch)?;
        let parts = self.model.loss(batch, &frozen, self.cfg.loss, self.cfg.lambda)?;
        let loss = scalar(&parts.total)?;
        let contrastive = scalar(&parts.contrastive)?;
        let mse = parts.mse.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        for (name, v) in [("contrastive loss", contrastive), ("style mse", mse), ("total loss", loss)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} is {v} at step {}", self.opt.step)));
            }
        }
        let grads = parts.total.backward()?;
        let step = self.opt.step;
        self.opt.update(&self.store, &grads, lr)?;
        ema_update_style(&self.store, self.cfg.ema_decay)?;
        Ok(StepStats {
            step,
            lr,
            loss,
            contrastive,
            mse,
        })
    }

    /// Runs the epoch loop from the current step counter. Shuffles and
    /// augmentations are keyed by seed, epoch and pair, so a run resumed from
    /// a checkpoint continues exactly as an uninterrupted one.
    pub fn fit(&mut self, src: &PairSource, opts: &FitOptions) -> Result<FitReport> {
        let start = Instant::now();
        let spe = src.batches_per_epoch(self.cfg.batch);
        if spe == 0 {
            return Err(Error::Invalid("not enough pairs for one batch".into()));
        }
        let total = self.cfg.epochs * spe;
        let warmup = self.cfg.warmup_epochs * spe;
        let mut report = FitReport::default();
        let first = self.opt.step as usize;
        let mut epoch = first / spe;
        while epoch < self.cfg.epochs {
            let batches = src.epoch_batches(self.cfg.seed, epoch, self.cfg.batch);
            let mut sum = 0.0;
            let mut n = 0usize;
            for (b, idx) in batches.iter().enumerate() {
                let global = epoch * spe + b;
                if global < self.opt.step as usize {
                    continue;
                }
                if opts.max_steps.is_some_and(|m| self.opt.step >= m) {
                    break;
                }
                let lr = cosine_lr(global + 1, total, warmup, self.cfg.lr_base, self.cfg.lr_final)?;
                let batch = src.make_batch(
                    idx,
                    self.cfg.seed,
                    epoch,
                    self.model.cfg.patch,
                    self.model.cfg.use_style,
                    self.store.dtype(),
                )?;
                let stats = self.step(&batch, lr)?;
                log::debug!("step {} lr {:.3e} loss {:.5}", stats.step, lr, stats.loss);
                sum += stats.loss;
                n += 1;
                report.steps += 1;
            }
            if n > 0 {
                let mean = sum / n as f64;
                log::info!("epoch {epoch} mean loss {mean:.5} ({n} steps)");
                report.epoch_losses.push((epoch, mean));
            }
            if opts.max_steps.is_some_and(|m| self.opt.step >= m) && (self.opt.step as usize) < (epoch + 1) * spe {
                break;
            }
            if let Some(dir) = &opts.epoch_dir {
                self.checkpoint()?.write(&dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
            epoch += 1;
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Rebuilds the model of a training checkpoint with parameters cast to `dtype`.
pub fn load_model(ckpt: &Checkpoint, dtype: DType) -> Result<(ParamStore, Model)> {
    let model_cfg: ModelConfig = ckpt.json(META_MODEL)?;
    let cfg: TrainConfig = ckpt.json(META_TRAIN)?;
    let mut store = ParamStore::new(dtype);
    for (name, e) in &ckpt.entries {
        let state = name.starts_with("meta.") || name.starts_with("adam.") || name.starts_with("opt.");
        if !state && matches!(e.values, Values::F32(_) | Values::F64(_)) {
            store.insert(name, &ckpt.tensor(name)?.to_dtype(dtype)?)?;
        }
    }
    let n_before = store.len();
    let mut model_cfg = model_cfg;
    model_cfg.alpha = cfg.alpha;
    let model = Model::new(&model_cfg, &mut store, cfg.seed)?;
    if store.len() != n_before {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing {} model parameters",
            store.len() - n_before
        )));
    }
    Ok((store, model))
}

pub(crate) fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
