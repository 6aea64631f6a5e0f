//! Seeded training is reproducible byte for byte, and checkpoints restore
//! training exactly.

use crvl::manifest::Dataset;
use crvl::model::ModelConfig;
use crvl::synth::{gen_dataset, DataSpec};
use crvl::trainer::{pretrain_text, Checkpoint, FitOptions, PairSource, PretrainConfig, TrainConfig, Trainer};

struct Fixture {
    _dir: tempfile::TempDir,
    src: PairSource,
    text: Checkpoint,
    model: ModelConfig,
    train: TrainConfig,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(&DataSpec { n_apps: 40, ..DataSpec::default() }, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    let model = ModelConfig::default();
    let pre = PretrainConfig { steps: 10, ..PretrainConfig::default() };
    let (text, _) = pretrain_text(&model, &data.records, &pre).unwrap();
    let train = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch: 16,
        lr_base: 1e-3,
        ..TrainConfig::default()
    };
    Fixture {
        src: PairSource::load(&data).unwrap(),
        _dir: dir,
        text,
        model,
        train,
    }
}

fn trained(f: &Fixture, opts: &FitOptions) -> Trainer {
    let mut t = Trainer::new(&f.model, &f.train, Some(&f.text)).unwrap();
    t.fit(&f.src, opts).unwrap();
    t
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let f = fixture();
    let a = trained(&f, &FitOptions::default()).checkpoint().unwrap().to_bytes();
    let b = trained(&f, &FitOptions::default()).checkpoint().unwrap().to_bytes();
    assert_eq!(a, b);

    let other = Fixture {
        train: TrainConfig { seed: 43, ..f.train.clone() },
        ..f
    };
    let c = trained(&other, &FitOptions::default()).checkpoint().unwrap().to_bytes();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let f = fixture();
    let t = trained(&f, &FitOptions { max_steps: Some(3), epoch_dir: None });
    let bytes = t.checkpoint().unwrap().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.checkpoint().unwrap().write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let restored = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(restored.checkpoint().unwrap().to_bytes(), bytes);
}

#[test]
fn resumed_run_equals_a_straight_run() {
    let f = fixture();
    let straight = trained(&f, &FitOptions::default());
    let total = straight.opt.step;
    for stop in [1, total / 2, total - 1] {
        let partial = trained(&f, &FitOptions { max_steps: Some(stop), epoch_dir: None });
        assert_eq!(partial.opt.step, stop);
        let bytes = partial.checkpoint().unwrap().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.fit(&f.src, &FitOptions::default()).unwrap();
        assert_eq!(resumed.opt.step, total);
        assert_eq!(
            resumed.checkpoint().unwrap().to_bytes(),
            straight.checkpoint().unwrap().to_bytes(),
            "resume from step {stop}"
        );
    }
}

#[test]
fn epoch_checkpoints_resume_to_the_same_end() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let straight = trained(&f, &FitOptions { max_steps: None, epoch_dir: Some(dir.path().to_path_buf()) });
    let ckpt = Checkpoint::read(&dir.path().join("epoch_0.ckpt")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    resumed.fit(&f.src, &FitOptions::default()).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes(), straight.checkpoint().unwrap().to_bytes());
    assert_eq!(
        std::fs::read(dir.path().join("epoch_2.ckpt")).unwrap(),
        straight.checkpoint().unwrap().to_bytes()
    );
}
