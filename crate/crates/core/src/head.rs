//! Rating classifier over frozen joint embeddings, with per-app majority
//! voting across an app's images.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AppRecord, Dataset};
use crate::model::{images_to_patches, Model, TextBatch};
use crate::nn::{fused, log_softmax_rows, softmax_last, Linear, ParamStore};
use crate::rating::ContentRating;
use crate::rng::{derive_rng, stream};
use crate::synth::tokenize;
use crate::trainer::{AdamW, AdamWConfig, Checkpoint};

pub const PREFIX: &str = "head.";
const META: &str = "meta.head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub branch_out: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            branch_out: 64,
            steps: 1500,
            batch: 64,
            lr: 1e-3,
            weight_decay: 0.02,
            seed: 42,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.branch_out == 0 || self.batch == 0 {
            return Err(Error::Config("head widths and batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("head lr and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two branch MLPs, one per modality, and a joint MLP over their concatenation.
#[derive(Debug, Clone)]
pub struct Head {
    img: [Linear; 2],
    txt: [Linear; 2],
    joint: [Linear; 2],
    d_joint: usize,
}

fn mlp(layers: &[Linear; 2], x: &Tensor) -> Result<Tensor> {
    layers[1].forward(&fused::gelu(&layers[0].forward(x)?)?)
}

impl Head {
    pub fn new(store: &mut ParamStore, d_joint: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        let rng = &mut derive_rng(seed, &[stream::HEAD, 0]);
        let mut lin = |name: &str, i: usize, o: usize| {
            Linear::new(store, &format!("{PREFIX}{name}"), i, o, true, (1.0 / i as f64).sqrt(), rng)
        };
        let (h, b) = (cfg.hidden, cfg.branch_out);
        Ok(Self {
            img: [lin("img.fc1", d_joint, h)?, lin("img.fc2", h, b)?],
            txt: [lin("txt.fc1", d_joint, h)?, lin("txt.fc2", h, b)?],
            joint: [lin("joint.fc1", 2 * b, h)?, lin("joint.fc2", h, ContentRating::COUNT)?],
            d_joint,
        })
    }

    /// Unnormalised scores `[B, 5]`.
    pub fn logits(&self, z_img: &Tensor, z_txt: &Tensor) -> Result<Tensor> {
        let (b, d) = z_img.dims2()?;
        if d != self.d_joint || z_txt.dims2()? != (b, d) {
            return Err(Error::Shape(format!(
                "head expects [B, {}] pairs, got {:?} and {:?}",
                self.d_joint,
                z_img.dims(),
                z_txt.dims()
            )));
        }
        let a = fused::gelu(&mlp(&self.img, z_img)?)?;
        let t = fused::gelu(&mlp(&self.txt, z_txt)?)?;
        mlp(&self.joint, &Tensor::cat(&[a, t], 1)?)
    }

    /// Rating probabilities `[B, 5]`.
    pub fn forward(&self, z_img: &Tensor, z_txt: &Tensor) -> Result<Tensor> {
        softmax_last(&self.logits(z_img, z_txt)?)
    }
}

/// A head with its parameters.
#[derive(Debug)]
pub struct HeadModel {
    pub cfg: HeadConfig,
    pub store: ParamStore,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    cfg: HeadConfig,
    d_joint: usize,
}

impl HeadModel {
    pub fn new(d_joint: usize, cfg: &HeadConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let head = Head::new(&mut store, d_joint, cfg, cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            head,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert_json(
            META,
            &HeadMeta {
                cfg: self.cfg.clone(),
                d_joint: self.head.d_joint,
            },
        )?;
        c.insert_store(&self.store)?;
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: HeadMeta = ckpt.json(META)?;
        meta.cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let n = ckpt.load_into(&mut store, PREFIX)?;
        let head = Head::new(&mut store, meta.d_joint, &meta.cfg, meta.cfg.seed)?;
        if store.len() != n {
            return Err(Error::Checkpoint(format!("head checkpoint is missing {} parameters", store.len() - n)));
        }
        Ok(Self {
            cfg: meta.cfg,
            store,
            head,
        })
    }
}

/// Joint embeddings of every (image, description) pair of a set of apps.
#[derive(Debug, Clone)]
pub struct PairEmbeddings {
    pub z_img: Tensor,
    pub z_txt: Tensor,
    /// Index into the embedded records, per pair.
    pub app: Vec<usize>,
    /// Declared rating ordinal of the pair's app.
    pub labels: Vec<usize>,
}

impl PairEmbeddings {
    pub fn len(&self) -> usize {
        self.app.len()
    }

    pub fn is_empty(&self) -> bool {
        self.app.is_empty()
    }
}

/// Inference text: the whole description, tokenized and truncated.
pub fn inference_tokens(rec: &AppRecord) -> Result<Vec<u32>> {
    let t = tokenize(&rec.description);
    if t.is_empty() {
        return Err(Error::Invalid(format!("app {} has an empty description", rec.app_id)));
    }
    Ok(t)
}

/// Embeds each image of each app with the app's description, `batch` pairs at a time.
pub fn embed_apps(model: &Model, data: &Dataset, records: &[AppRecord], batch: usize) -> Result<PairEmbeddings> {
    if records.is_empty() {
        return Err(Error::Invalid("no apps to embed".into()));
    }
    let mut jobs = Vec::new();
    for (a, rec) in records.iter().enumerate() {
        let tokens = inference_tokens(rec)?;
        let images = data.load_images(rec)?;
        for img in images {
            jobs.push((a, img, tokens.clone()));
        }
    }
    let (mut zi, mut zt) = (Vec::new(), Vec::new());
    for chunk in jobs.chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|(_, i, _)| i).collect();
        let toks: Vec<_> = chunk.iter().map(|(_, _, t)| t.clone()).collect();
        let out = model.embed(&images_to_patches(&imgs, model.cfg.patch, model.dtype())?, &TextBatch::new(&toks)?)?;
        zi.push(out.z_img.detach());
        zt.push(out.z_txt.detach());
    }
    Ok(PairEmbeddings {
        z_img: Tensor::cat(&zi, 0)?,
        z_txt: Tensor::cat(&zt, 0)?,
        app: jobs.iter().map(|(a, _, _)| *a).collect(),
        labels: jobs.iter().map(|(a, _, _)| records[*a].declared.ordinal()).collect(),
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HeadReport {
    /// Cross-entropy of every step.
    pub losses: Vec<f64>,
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let b = labels.len();
    let mut onehot = vec![0f64; b * ContentRating::COUNT];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * ContentRating::COUNT + y] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, ContentRating::COUNT), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_softmax_rows(logits)? * onehot)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// Trains a fresh head with cross-entropy on the declared ratings of
/// precomputed embeddings. The embeddings carry no graph, so nothing
/// upstream of them can change.
pub fn fit_head(emb: &PairEmbeddings, cfg: &HeadConfig) -> Result<(HeadModel, HeadReport)> {
    if emb.is_empty() {
        return Err(Error::Invalid("no training pairs for the head".into()));
    }
    let d_joint = emb.z_img.dim(1)?;
    let hm = HeadModel::new(d_joint, cfg, emb.z_img.dtype())?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(&hm.store, adam, &[PREFIX], &[])?;
    let mut report = HeadReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0;
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order = (0..emb.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, &[stream::HEAD, 1, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + cfg.batch).min(order.len());
        let idx: Vec<u32> = order[cursor..end].iter().map(|&i| i as u32).collect();
        cursor = end;
        let ids = Tensor::new(idx.as_slice(), emb.z_img.device())?;
        let labels: Vec<usize> = idx.iter().map(|&i| emb.labels[i as usize]).collect();
        let logits = hm.head.logits(&emb.z_img.index_select(&ids, 0)?, &emb.z_txt.index_select(&ids, 0)?)?;
        let loss = cross_entropy(&logits, &labels)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("head loss at step {step}")));
        }
        report.losses.push(value);
        opt.update(&hm.store, &loss.backward()?, cfg.lr)?;
    }
    Ok((hm, report))
}

/// Embeds the training apps with the frozen model and fits a head on them.
pub fn train_head(
    model: &Model,
    data: &Dataset,
    records: &[AppRecord],
    cfg: &HeadConfig,
) -> Result<(HeadModel, HeadReport)> {
    if records.is_empty() {
        return Err(Error::Invalid("empty manifest".into()));
    }
    fit_head(&embed_apps(model, data, records, 64)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub app_id: String,
    pub declared: ContentRating,
    /// Per-image predictions, icon first.
    pub votes: Vec<ContentRating>,
    pub majority: ContentRating,
}

/// Most frequent rating; ties go to the more restrictive one.
pub fn majority_vote(votes: &[ContentRating]) -> Result<ContentRating> {
    if votes.is_empty() {
        return Err(Error::Invalid("no votes".into()));
    }
    let mut counts = [0usize; ContentRating::COUNT];
    for v in votes {
        counts[v.ordinal()] += 1;
    }
    let best = *counts.iter().max().expect("five classes");
    let winner = (0..ContentRating::COUNT).rev().find(|&r| counts[r] == best).expect("a maximum exists");
    Ok(ContentRating::ALL[winner])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Votes of precomputed embeddings, grouped back into their apps.
pub fn predict_embedded(head: &Head, emb: &PairEmbeddings, records: &[AppRecord]) -> Result<Vec<PredictionRecord>> {
    let probs = head.forward(&emb.z_img, &emb.z_txt)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut votes = vec![Vec::new(); records.len()];
    for (row, &a) in probs.iter().zip(&emb.app) {
        votes[a].push(ContentRating::ALL[argmax(row)]);
    }
    records
        .iter()
        .zip(votes)
        .map(|(rec, votes)| {
            Ok(PredictionRecord {
                app_id: rec.app_id.clone(),
                declared: rec.declared,
                majority: majority_vote(&votes)?,
                votes,
            })
        })
        .collect()
}

pub fn predict_apps(model: &Model, head: &Head, data: &Dataset, records: &[AppRecord]) -> Result<Vec<PredictionRecord>> {
    predict_embedded(head, &embed_apps(model, data, records, 64)?, records)
}

/// Pairs each image of `rec` with its description and takes the majority vote.
pub fn predict_app(model: &Model, head: &Head, data: &Dataset, rec: &AppRecord) -> Result<PredictionRecord> {
    let mut out = predict_apps(model, head, data, std::slice::from_ref(rec))?;
    Ok(out.remove(0))
}

/// Fraction of apps whose majority equals the declared rating.
pub fn accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    let hits = preds.iter().filter(|p| p.majority == p.declared).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
