//! Cross-attention weights and the word rankings built from them.

use candle_core::{DType, Device, Tensor};
use crvl::head::inference_tokens;
use crvl::manifest::Dataset;
use crvl::model::{AttentionSide, Model, ModelConfig};
use crvl::nn::fused::attention;
use crvl::nn::{Attention, ParamStore};
use crvl::rng::derive_rng;
use crvl::synth::{gen_dataset, DataSpec, Vocab};
use crvl::viz::{region_top_tokens, top_tokens_per_patch, AttentionMap, PatchRegion, StopList};

fn corpus(n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(&DataSpec { n_apps: n, seed: 11, ..DataSpec::default() }, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    (dir, data)
}

fn model() -> Model {
    let mut store = ParamStore::new(DType::F32);
    Model::new(&ModelConfig::default(), &mut store, 5).unwrap()
}

#[test]
fn extracted_rows_are_distributions() {
    let (_dir, data) = corpus(6);
    let model = model();
    for rec in &data.records {
        let tokens = inference_tokens(rec).unwrap();
        for path in rec.image_paths() {
            let img = data.load_image(path).unwrap();
            for layer in 0..model.fusion().n_blocks() {
                for side in [AttentionSide::ImageToText, AttentionSide::TextToImage] {
                    let a = AttentionMap::from_tensor(&model.extract_attention(&img, &tokens, layer, side).unwrap()).unwrap();
                    for h in 0..a.heads {
                        for q in 0..a.queries {
                            let row = a.row(h, q);
                            let sum: f64 = row.iter().map(|&w| w as f64).sum();
                            assert!((sum - 1.0).abs() <= 1e-5, "{side:?} layer {layer} head {h} row {q}: {sum}");
                            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn out_of_range_layer_is_rejected() {
    let (_dir, data) = corpus(1);
    let model = model();
    let rec = &data.records[0];
    let img = data.load_image(&rec.icon).unwrap();
    let tokens = inference_tokens(rec).unwrap();
    assert!(model.extract_attention(&img, &tokens, 99, AttentionSide::ImageToText).is_err());
}

#[test]
fn rankings_never_contain_stop_or_pad_tokens() {
    let (_dir, data) = corpus(12);
    let model = model();
    let stop = StopList::standard();
    let vocab = Vocab::standard();
    assert!(!stop.is_empty());
    for rec in &data.records {
        let tokens = inference_tokens(rec).unwrap();
        let img = data.load_image(&rec.icon).unwrap();
        let a = AttentionMap::from_tensor(&model.extract_attention(&img, &tokens, 0, AttentionSide::ImageToText).unwrap()).unwrap();
        for head in 0..a.heads {
            let per_patch = top_tokens_per_patch(&a, &tokens, &stop, 5, head).unwrap();
            let region = PatchRegion::new([0, 1, 8, 9], 8).unwrap();
            let region_top = region_top_tokens(&a, &region, &tokens, &stop, 5, head).unwrap();
            for t in per_patch.iter().flatten().chain(&region_top) {
                assert!(!stop.contains(t.id), "stop word {:?} ranked", t.token);
                assert_ne!(t.id, Vocab::PAD);
                assert_eq!(t.token, vocab.word(t.id));
                assert_eq!(tokens[t.position], t.id);
            }
            for ranked in &per_patch {
                assert!(ranked.len() <= 5);
                assert!(ranked.windows(2).all(|w| w[0].weight >= w[1].weight));
            }
        }
    }
}

#[test]
fn region_ranking_ignores_patch_order() {
    let (_dir, data) = corpus(2);
    let model = model();
    let stop = StopList::standard();
    let rec = &data.records[1];
    let tokens = inference_tokens(rec).unwrap();
    let img = data.load_image(&rec.icon).unwrap();
    let a = AttentionMap::from_tensor(&model.extract_attention(&img, &tokens, 0, AttentionSide::ImageToText).unwrap()).unwrap();
    let fwd = PatchRegion::new([18, 19, 20, 27, 35], 8).unwrap();
    let rev = PatchRegion::new([35, 27, 20, 19, 18], 8).unwrap();
    assert_eq!(
        region_top_tokens(&a, &fwd, &tokens, &stop, 5, 1).unwrap(),
        region_top_tokens(&a, &rev, &tokens, &stop, 5, 1).unwrap()
    );
    assert!(PatchRegion::new([0, 2], 8).is_err());
    assert!(PatchRegion::new(Vec::<usize>::new(), 8).is_err());
    assert!(PatchRegion::new([64], 8).is_err());
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn singleton_memory_returns_the_value_projection() {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = derive_rng(8, &[]);
    let layer = Attention::new(&mut store, "x", 16, 4, 0.3, &mut rng).unwrap();
    let queries = Tensor::randn(0f64, 1.0, (3, 7, 16), &Device::Cpu).unwrap();
    let memory = Tensor::randn(0f64, 1.0, (3, 1, 16), &Device::Cpu).unwrap();
    let out = layer.forward(&queries, &memory, None).unwrap();
    let expect = layer
        .output_projection(&layer.value_projection(&memory).unwrap())
        .unwrap()
        .broadcast_as((3, 7, 16))
        .unwrap();
    assert!(max_abs_diff(&out, &expect) <= 1e-6);

    let q = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
    let k = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
    let v = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
    let ctx = attention(&q, &k, &v, 2, None).unwrap();
    assert!(max_abs_diff(&ctx, &v.broadcast_as((2, 5, 8)).unwrap()) <= 1e-12);
}

#[test]
fn permuting_memory_permutes_columns_and_keeps_the_context() {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = derive_rng(9, &[]);
    let layer = Attention::new(&mut store, "x", 16, 4, 0.3, &mut rng).unwrap();
    let queries = Tensor::randn(0f64, 1.0, (1, 6, 16), &Device::Cpu).unwrap();
    let memory = Tensor::randn(0f64, 1.0, (1, 5, 16), &Device::Cpu).unwrap();
    let perm = [3u32, 0, 4, 1, 2];
    let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
    let shuffled = memory.index_select(&idx, 1).unwrap();

    let out = layer.forward(&queries, &memory, None).unwrap();
    let out_p = layer.forward(&queries, &shuffled, None).unwrap();
    assert!(max_abs_diff(&out, &out_p) <= 1e-12);

    let w = layer.weights(&queries, &memory, None).unwrap();
    let w_p = layer.weights(&queries, &shuffled, None).unwrap();
    assert!(max_abs_diff(&w.index_select(&idx, 3).unwrap(), &w_p) <= 1e-12);
}

#[test]
fn padding_keys_get_no_weight() {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = derive_rng(10, &[]);
    let layer = Attention::new(&mut store, "x", 8, 2, 0.3, &mut rng).unwrap();
    let queries = Tensor::randn(0f64, 1.0, (2, 4, 8), &Device::Cpu).unwrap();
    let memory = Tensor::randn(0f64, 1.0, (2, 6, 8), &Device::Cpu).unwrap();
    let all = layer.weights(&queries, &memory, Some(&[3, 6])).unwrap();
    let w: Vec<Vec<Vec<Vec<f64>>>> = (0..2).map(|b| all.get(b).unwrap().to_vec3::<f64>().unwrap()).collect();
    for h in 0..2 {
        for row in &w[0][h] {
            assert!(row[3..].iter().all(|&x| x == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
