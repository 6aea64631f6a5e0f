//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::audit::{audit_report, deletion_rates, metrics, ConfusionMatrix, DEFAULT_BUCKET_EDGES};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::gen_split;
use crate::head::{
    accuracy, embed_apps, fit_head, inference_tokens, predict_embedded, read_predictions, write_predictions,
    HeadModel,
};
use crate::manifest::Dataset;
use crate::model::AttentionSide;
use crate::synth::Vocab;
use crate::trainer::gradcheck::grad_check_store;
use crate::trainer::{
    grad_check, load_model, pretrain_text, Checkpoint, FitOptions, GradCheckConfig, PairSource, Trainer,
};
use crate::viz::{
    export_heatmap, region_top_tokens, top_tokens_per_patch, AttentionMap, PatchRegion, RankedToken, StopList,
};

#[derive(Debug, Parser)]
#[command(name = "crvl", version, about = "Vision-language content rating and audit toolkit")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Overrides every seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test corpus under OUT/train and OUT/test.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pretraining of the text encoder.
    PretrainText {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip pretraining and keep the random initialisation.
        #[arg(long)]
        random_frozen: bool,
    },
    /// Contrastive training of the vision-language model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained text encoder; pretrains one first when absent.
        #[arg(long)]
        text_ckpt: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Keep a checkpoint after every epoch in this directory.
        #[arg(long)]
        epoch_dir: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    GradCheck {
        /// Check a trained model (in f64) instead of the toy one.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 120)]
        params: usize,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Fit the rating head on a trained model's embeddings.
    TrainHead {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Majority-vote rating predictions as JSONL.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flag malpractice and disguise and write the audit report.
    Audit {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_severity: u8,
    },
    /// Removal rates per flag and download bucket as CSV.
    DeletionRates {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated bucket edges.
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<u64>>,
    },
    /// Rank the words image patches attend to and render heatmaps.
    VizAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        app: String,
        /// Image index within the app; 0 is the icon.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Comma-separated 4-connected patch indices.
        #[arg(long, value_delimiter = ',')]
        region: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification metrics of a confusion matrix file.
    Metrics {
        /// Whitespace or comma separated rows of counts, declared by row.
        #[arg(long)]
        cm: PathBuf,
    },
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a square count matrix of at most five classes.
pub fn parse_confusion(text: &str) -> Result<ConfusionMatrix> {
    let rows: Vec<Vec<u64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<u64>().map_err(|_| Error::Invalid(format!("bad count {t:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = rows.len();
    if k == 0 || k > 5 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid(format!("confusion matrix must be square with 1 to 5 rows, got {k} rows")));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, row) in rows.iter().enumerate() {
        cm.counts[i][..k].copy_from_slice(row);
    }
    Ok(cm)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    let seed = cli.seed;
    match cli.command {
        Command::GenData { spec, out } => {
            let cfg = load_config(spec.as_deref(), seed)?;
            let (train, test) = gen_split(&cfg.experiment.data, cfg.experiment.n_test, &out)?;
            cfg.echo(&out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::PretrainText { config, data, out, random_frozen } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if random_frozen {
                cfg.experiment.pretrain.steps = 0;
            }
            let data = Dataset::open(&data)?;
            let (ckpt, report) = pretrain_text(&cfg.experiment.model, &data.records, &cfg.experiment.pretrain)?;
            ensure_parent(&out)?;
            ckpt.write(&out)?;
            cfg.echo(&parent_dir(&out))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Train { config, data, out, text_ckpt, resume, max_steps, epoch_dir } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let data = Dataset::open(&data)?;
            let mut trainer = match (resume, text_ckpt) {
                (Some(r), _) => Trainer::from_checkpoint(&Checkpoint::read(&r)?)?,
                (None, Some(t)) => {
                    Trainer::new(&cfg.experiment.model, &cfg.experiment.train, Some(&Checkpoint::read(&t)?))?
                }
                (None, None) => {
                    let (text, _) = pretrain_text(&cfg.experiment.model, &data.records, &cfg.experiment.pretrain)?;
                    Trainer::new(&cfg.experiment.model, &cfg.experiment.train, Some(&text))?
                }
            };
            if let Some(dir) = &epoch_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let src = PairSource::load(&data)?;
            let report = trainer.fit(&src, &FitOptions { max_steps, epoch_dir })?;
            ensure_parent(&out)?;
            trainer.checkpoint()?.write(&out)?;
            cfg.echo(&parent_dir(&out))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::GradCheck { ckpt, params, h, tol } => {
            let cfg = GradCheckConfig {
                n_params: params,
                h,
                seed: seed.unwrap_or(GradCheckConfig::default().seed),
                ..GradCheckConfig::default()
            };
            let report = match ckpt {
                Some(p) => {
                    let (store, model) = load_model(&Checkpoint::read(&p)?, DType::F64)?;
                    grad_check_store(&model, &store, &cfg)?
                }
                None => grad_check(&cfg)?,
            };
            println!(
                "checked {} parameters: max relative error {:.3e} in {:.2}s",
                report.entries.len(),
                report.max_rel_error,
                report.seconds
            );
            if !(report.max_rel_error <= tol) {
                return Err(Error::NonFinite(format!(
                    "gradient check: relative error {:.3e} above {tol:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::TrainHead { config, ckpt, data, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ckpt = Checkpoint::read(&ckpt)?;
            let (_store, model) = load_model(&ckpt, DType::F32)?;
            let data = Dataset::open(&data)?;
            let emb = embed_apps(&model, &data, &data.records, 64)?;
            let (head, report) = fit_head(&emb, &cfg.experiment.head)?;
            ensure_parent(&out)?;
            head.checkpoint()?.write(&out)?;
            cfg.echo(&parent_dir(&out))?;
            let first = report.losses.first().copied().unwrap_or(f64::NAN);
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            println!("head loss {first:.4} -> {last:.4}");
        }
        Command::Predict { ckpt, head, data, out } => {
            let (_store, model) = load_model(&Checkpoint::read(&ckpt)?, DType::F32)?;
            let head = HeadModel::from_checkpoint(&Checkpoint::read(&head)?, DType::F32)?;
            let data = Dataset::open(&data)?;
            let emb = embed_apps(&model, &data, &data.records, 64)?;
            let preds = predict_embedded(&head.head, &emb, &data.records)?;
            ensure_parent(&out)?;
            write_predictions(&out, &preds)?;
            println!("accuracy {:.4} over {} apps", accuracy(&preds)?, preds.len());
        }
        Command::Audit { predictions, data, out, min_severity } => {
            if min_severity > 4 {
                return Err(Error::Usage(format!("--min-severity {min_severity} above 4")));
            }
            let preds = read_predictions(&predictions)?;
            let data = Dataset::open(&data)?;
            let known: std::collections::HashSet<&str> = data.records.iter().map(|r| r.app_id.as_str()).collect();
            if let Some(p) = preds.iter().find(|p| !known.contains(p.app_id.as_str())) {
                return Err(Error::Invalid(format!("prediction for unknown app {}", p.app_id)));
            }
            let report = audit_report(&preds, min_severity);
            write_json(&out, &report)?;
            let s = &report.summary;
            println!(
                "{} apps: {:.1}% correct, {:.1}% malpractice, {:.1}% disguise",
                s.total, s.correct_pct, s.malpractice_pct, s.disguise_pct
            );
        }
        Command::DeletionRates { predictions, data, out, edges } => {
            let preds = read_predictions(&predictions)?;
            let data = Dataset::open(&data)?;
            let edges = edges.unwrap_or_else(|| DEFAULT_BUCKET_EDGES.to_vec());
            let table = deletion_rates(&preds, &data.records, &edges)?;
            ensure_parent(&out)?;
            table.write_csv(&out)?;
            print!("{}", table.to_csv());
        }
        Command::VizAttention { ckpt, data, app, image, region, k, head, layer, out } => {
            viz_attention(&ckpt, &data, &app, image, region.as_deref(), k, head, layer, &out)?;
        }
        Command::Metrics { cm } => {
            let text = std::fs::read_to_string(&cm).map_err(|e| Error::io(&cm, e))?;
            let m = metrics(&parse_confusion(&text)?)?;
            println!("accuracy {}", m.accuracy);
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VizOutput {
    app_id: String,
    image: usize,
    head: usize,
    layer: usize,
    tokens: Vec<String>,
    per_patch: Vec<Vec<RankedToken>>,
    region: Option<Vec<usize>>,
    region_top: Option<Vec<RankedToken>>,
    heatmaps: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn viz_attention(
    ckpt: &Path,
    data: &Path,
    app: &str,
    image: usize,
    region: Option<&[usize]>,
    k: usize,
    head: usize,
    layer: usize,
    out: &Path,
) -> Result<()> {
    let (_store, model) = load_model(&Checkpoint::read(ckpt)?, DType::F32)?;
    let data = Dataset::open(data)?;
    let rec = data.find(app).ok_or_else(|| Error::Invalid(format!("no app {app:?} in the manifest")))?;
    let path = rec
        .image_paths()
        .nth(image)
        .ok_or_else(|| Error::Invalid(format!("app {app} has no image {image}")))?;
    let img = data.load_image(path)?;
    let tokens = inference_tokens(rec)?;
    let attn = AttentionMap::from_tensor(&model.extract_attention(&img, &tokens, layer, AttentionSide::ImageToText)?)?;
    if head >= attn.heads {
        return Err(Error::Usage(format!("--head {head} out of range for {} heads", attn.heads)));
    }
    let stop = StopList::standard();
    let per_patch = top_tokens_per_patch(&attn, &tokens, &stop, k, head)?;
    let grid = model.cfg.image_size / model.cfg.patch;
    let region_set = match region {
        Some(r) => PatchRegion::new(r.iter().copied(), grid)?,
        None => PatchRegion::new(0..attn.queries, grid)?,
    };
    let top = region_top_tokens(&attn, &region_set, &tokens, &stop, k, head)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut heatmaps = Vec::new();
    for t in &top {
        let name = format!("heatmap_h{head}_pos{}_{}.ppm", t.position, t.token);
        export_heatmap(&img, &attn, t.position, head, model.cfg.patch, &out.join(&name))?;
        heatmaps.push(name);
    }
    let vocab = Vocab::standard();
    let result = VizOutput {
        app_id: rec.app_id.clone(),
        image,
        head,
        layer,
        tokens: tokens.iter().map(|&t| vocab.word(t).to_string()).collect(),
        per_patch,
        region: region.map(<[usize]>::to_vec),
        region_top: Some(top),
        heatmaps,
    };
    write_json(&out.join("rankings.json"), &result)?;
    println!("{}", out.join("rankings.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["crvl"]), 1);
        assert_eq!(dispatch(["crvl", "frobnicate"]), 1);
        assert_eq!(dispatch(["crvl", "metrics"]), 1);
        assert_eq!(dispatch(["crvl", "--help"]), 0);
    }

    #[test]
    fn confusion_files() {
        let cm = parse_confusion("# declared by row\n3 0\n0, 4\n").unwrap();
        assert_eq!(cm.counts[0][0], 3);
        assert_eq!(cm.counts[1][1], 4);
        assert_eq!(cm.total(), 7);
        for bad in ["", "1 2\n3\n", "1 x\n2 3\n", "1 1 1 1 1 1\n1 1 1 1 1 1\n1 1 1 1 1 1\n1 1 1 1 1 1\n1 1 1 1 1 1\n1 1 1 1 1 1\n"] {
            assert!(parse_confusion(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn metrics_command_on_a_diagonal_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.txt");
        std::fs::write(&path, "5 0 0\n0 2 0\n0 0 9\n").unwrap();
        assert_eq!(dispatch(["crvl", "metrics", "--cm", path.to_str().unwrap()]), 0);
        let m = metrics(&parse_confusion(&std::fs::read_to_string(&path).unwrap()).unwrap()).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(dispatch(["crvl", "metrics", "--cm", dir.path().join("missing").to_str().unwrap()]), 2);
    }
}
