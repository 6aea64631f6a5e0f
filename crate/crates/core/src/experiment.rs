//! End-to-end runs on a generated train/test split: data, text pretraining,
//! contrastive training, head fitting and held-out evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{accuracy, embed_apps, fit_head, predict_embedded, HeadConfig, PredictionRecord};
use crate::manifest::{AppRecord, Dataset, Tag};
use crate::model::ModelConfig;
use crate::synth::{gen_dataset, DataSpec};
use crate::losses::LossVariant;
use crate::trainer::{pretrain_text, Checkpoint, FitOptions, PairSource, PretrainConfig, TrainConfig, Trainer};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";

/// Seed offset between the train and test corpora.
const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Writes `out/train` and `out/test`, two independent corpora generated
/// from `spec` with different seeds and id prefixes.
pub fn gen_split(spec: &DataSpec, n_test: usize, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let train = DataSpec {
        id_prefix: format!("{}train-", spec.id_prefix),
        ..spec.clone()
    };
    let test = DataSpec {
        n_apps: n_test,
        seed: spec.seed.wrapping_add(TEST_SEED_OFFSET),
        id_prefix: format!("{}test-", spec.id_prefix),
        ..spec.clone()
    };
    let (a, b) = (out.join(TRAIN_DIR), out.join(TEST_DIR));
    gen_dataset(&train, &a)?;
    gen_dataset(&test, &b)?;
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub n_test: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            n_test: 500,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Same run with every stage seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c.pretrain.seed = seed;
        c.train.seed = seed;
        c.head.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data: f64,
    pub pretrain: f64,
    pub fit: f64,
    pub head: f64,
    pub predict: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub apps: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub accuracy: f64,
    pub style_critical: SubsetAccuracy,
    pub fusion_critical: SubsetAccuracy,
    pub train_pairs: usize,
    pub fit_steps: u64,
    pub final_loss: Option<f64>,
    pub timings: Timings,
    #[serde(skip)]
    pub predictions: Vec<PredictionRecord>,
}

/// Accuracy over the apps carrying `tag`; `None` when there are none.
pub fn subset_accuracy(preds: &[PredictionRecord], records: &[AppRecord], tag: Tag) -> Result<SubsetAccuracy> {
    let picked: Vec<PredictionRecord> = preds
        .iter()
        .filter(|p| {
            records
                .iter()
                .find(|r| r.app_id == p.app_id)
                .is_some_and(|r| r.has_tag(tag))
        })
        .cloned()
        .collect();
    Ok(SubsetAccuracy {
        apps: picked.len(),
        accuracy: if picked.is_empty() { None } else { Some(accuracy(&picked)?) },
    })
}

/// Generated split and pretrained text encoder shared by runs that differ
/// only downstream of them.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub text: Checkpoint,
    pub data_seconds: f64,
    pub pretrain_seconds: f64,
}

/// Generates the split inside `dir` unless it already exists, then
/// pretrains the text encoder.
pub fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    if cfg.model.image_size != cfg.data.image_size {
        return Err(Error::Config(format!(
            "model image size {} differs from data image size {}",
            cfg.model.image_size, cfg.data.image_size
        )));
    }
    let start = Instant::now();
    let (train_dir, test_dir) = (dir.join(TRAIN_DIR), dir.join(TEST_DIR));
    if !(train_dir.exists() && test_dir.exists()) {
        gen_split(&cfg.data, cfg.n_test, dir)?;
    }
    let train = Dataset::open(&train_dir)?;
    let test = Dataset::open(&test_dir)?;
    let data_seconds = start.elapsed().as_secs_f64();
    let lap = Instant::now();
    let (text, _) = pretrain_text(&cfg.model, &train.records, &cfg.pretrain)?;
    Ok(Prepared {
        train,
        test,
        text,
        data_seconds,
        pretrain_seconds: lap.elapsed().as_secs_f64(),
    })
}

/// Contrastive training, head fitting and held-out prediction.
pub fn train_and_evaluate(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentReport> {
    let mut t = Timings {
        data: prep.data_seconds,
        pretrain: prep.pretrain_seconds,
        ..Timings::default()
    };
    let lap = Instant::now();
    let src = PairSource::load(&prep.train)?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, Some(&prep.text))?;
    let fit = trainer.fit(&src, &FitOptions::default())?;
    t.fit = lap.elapsed().as_secs_f64();

    let lap = Instant::now();
    let emb = embed_apps(&trainer.model, &prep.train, &prep.train.records, 64)?;
    let (head, _) = fit_head(&emb, &cfg.head)?;
    t.head = lap.elapsed().as_secs_f64();

    let lap = Instant::now();
    let test_emb = embed_apps(&trainer.model, &prep.test, &prep.test.records, 64)?;
    let predictions = predict_embedded(&head.head, &test_emb, &prep.test.records)?;
    t.predict = lap.elapsed().as_secs_f64();
    t.total = t.data + t.pretrain + t.fit + t.head + t.predict;

    Ok(ExperimentReport {
        accuracy: accuracy(&predictions)?,
        style_critical: subset_accuracy(&predictions, &prep.test.records, Tag::StyleCritical)?,
        fusion_critical: subset_accuracy(&predictions, &prep.test.records, Tag::FusionCritical)?,
        train_pairs: src.len(),
        fit_steps: fit.steps,
        final_loss: fit.epoch_losses.last().map(|&(_, l)| l),
        timings: t,
        predictions,
    })
}

/// Runs the whole pipeline inside `dir`, generating the split there unless
/// it already exists.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    train_and_evaluate(cfg, &prepare(cfg, dir)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoStyle,
    NoCrossAttention,
    Sce,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoStyle, Variant::NoCrossAttention, Variant::Sce];

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoStyle => c.model.use_style = false,
            Variant::NoCrossAttention => c.model.cross_attention = false,
            Variant::Sce => c.train.loss = LossVariant::Sce,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: ExperimentReport,
}

/// Every variant at every seed. Runs with the same seed share the split
/// (under `dir/seed-{seed}`) and the pretrained text encoder.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64], variants: &[Variant], dir: &Path) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let base = cfg.with_seed(seed);
        let prep = prepare(&base, &dir.join(format!("seed-{seed}")))?;
        for &variant in variants {
            let report = train_and_evaluate(&variant.apply(&base), &prep)?;
            log::info!("seed {seed} {variant:?}: accuracy {:.4}", report.accuracy);
            runs.push(AblationRun { variant, seed, report });
        }
    }
    Ok(runs)
}

/// Mean over seeds of `pick` for one variant; `None` if any run lacks it.
pub fn mean_over_seeds(runs: &[AblationRun], variant: Variant, pick: impl Fn(&ExperimentReport) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = runs.iter().filter(|r| r.variant == variant).map(|r| pick(&r.report)).collect();
    let vals = vals?;
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
