//! Straight-line reimplementation of the classifier forward pass, used as an
//! oracle for the batched matrix implementation, plus training behaviour.

use ciac_core::gesture::*;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t<'a>(p: &'a ModelParams, name: &str) -> ArrayView2<'a, f64> {
    p.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}"))
}

fn layer_norm(x: &[f64], g: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[(0, i)] + b[(0, i)]).collect()
}

fn affine(x: &[f64], w: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| b[(0, j)] + (0..w.nrows()).map(|i| x[i] * w[(i, j)]).sum::<f64>())
        .collect()
}

fn naive_logits(p: &ModelParams, window: ArrayView2<f64>) -> Vec<f64> {
    let sh = *p.shape();
    let (tl, d, h) = (sh.window_len, sh.d_model, sh.heads);
    let dh = d / h;
    let st = p.standardizer();
    let pe = p.positional();
    let mut e: Vec<Vec<f64>> = (0..tl)
        .map(|s| {
            let x: Vec<f64> = (0..sh.features).map(|f| (window[(s, f)] - st.mean[f]) / st.scale[f]).collect();
            let mut row = affine(&x, t(p, "embed.w"), t(p, "embed.b"));
            for k in 0..d {
                row[k] += pe[(s, k)];
            }
            row
        })
        .collect();
    for blk in 0..sh.blocks {
        let n = |s: &str| format!("block{blk}.{s}");
        let a: Vec<Vec<f64>> = e.iter().map(|r| layer_norm(r, t(p, &n("ln1.gamma")), t(p, &n("ln1.beta")))).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| affine(r, t(p, &n("attn.wq")), t(p, &n("attn.bq")))).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| affine(r, t(p, &n("attn.wk")), t(p, &n("attn.bk")))).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| affine(r, t(p, &n("attn.wv")), t(p, &n("attn.bv")))).collect();
        let mut o = vec![vec![0.0; d]; tl];
        for head in 0..h {
            for i in 0..tl {
                let scores: Vec<f64> = (0..tl)
                    .map(|j| (0..dh).map(|c| q[i][head * dh + c] * k[j][head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for c in 0..dh {
                    o[i][head * dh + c] = (0..tl).map(|j| ex[j] / z * v[j][head * dh + c]).sum();
                }
            }
        }
        for i in 0..tl {
            let m = affine(&o[i], t(p, &n("attn.wo")), t(p, &n("attn.bo")));
            let mid: Vec<f64> = (0..d).map(|c| e[i][c] + m[c]).collect();
            let b = layer_norm(&mid, t(p, &n("ln2.gamma")), t(p, &n("ln2.beta")));
            let hdn: Vec<f64> = affine(&b, t(p, &n("ffn.w1")), t(p, &n("ffn.b1"))).into_iter().map(|z| z.max(0.0)).collect();
            let f = affine(&hdn, t(p, &n("ffn.w2")), t(p, &n("ffn.b2")));
            e[i] = (0..d).map(|c| mid[c] + f[c]).collect();
        }
    }
    let z: Vec<Vec<f64>> = e.iter().map(|r| layer_norm(r, t(p, "norm.gamma"), t(p, "norm.beta"))).collect();
    let pooled: Vec<f64> = (0..d).map(|c| z.iter().map(|r| r[c]).sum::<f64>() / tl as f64).collect();
    let h1: Vec<f64> = affine(&pooled, t(p, "dense1.w"), t(p, "dense1.b")).into_iter().map(|z| z.max(0.0)).collect();
    let h2: Vec<f64> = affine(&h1, t(p, "dense2.w"), t(p, "dense2.b")).into_iter().map(|z| z.max(0.0)).collect();
    affine(&h2, t(p, "head.w"), t(p, "head.b"))
}

fn random_window(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn logits_match_straight_line_oracle() {
    let shape = ModelShape { window_len: 12, features: 5, d_model: 8, heads: 2, ff_dim: 16, blocks: 2, dense_units: 6, classes: NUM_CLASSES };
    let mut p = ModelParams::init(shape, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for v in p.values_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    p.set_standardizer(Standardizer { mean: vec![0.3; 5], scale: vec![1.7; 5] }).unwrap();
    for _ in 0..5 {
        let w = random_window(&mut rng, 12, 5);
        let fast = p.logits_view(w.view()).unwrap();
        let slow = naive_logits(&p, w.view());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn full_size_model_matches_oracle() {
    let p = ModelParams::init(ModelShape::standard(64, 4), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_window(&mut rng, WINDOW_LEN, STREAM_FEATURES);
    let fast = p.logits_view(w.view()).unwrap();
    let slow = naive_logits(&p, w.view());
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-10);
    }
    let probs = p.forward(&FeatureWindow::new(w).unwrap()).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

/// Two classes separated by the sign of one feature's mean.
fn separable(n: usize, seed: u64) -> Vec<LabeledWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { GestureClass::Push } else { GestureClass::Pull };
            let shift = if label == GestureClass::Push { 1.0 } else { -1.0 };
            let mut w = random_window(&mut rng, WINDOW_LEN, STREAM_FEATURES) * 0.5;
            w.column_mut(3).mapv_inplace(|v| v + shift);
            LabeledWindow { window: FeatureWindow::new(w).unwrap(), label, recording: i % 4 }
        })
        .collect()
}

#[test]
fn separable_toy_is_learned() {
    let data = separable(64, 1);
    let cfg = TrainConfig { epochs: 50, d_model: 16, heads: 2, dropout: 0.0, ..TrainConfig::default() };
    let out = train(&data, &cfg).unwrap();
    let first_perfect = out.history.iter().position(|m| m.accuracy >= 0.99);
    assert!(first_perfect.is_some(), "history {:?}", out.history);
    assert!(accuracy(&out.params, &data).unwrap() >= 0.99);
    for (i, m) in out.history.iter().enumerate() {
        assert_eq!(m.epoch, i);
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = separable(8, 2);
    let cfg = TrainConfig { epochs: 0, d_model: 8, heads: 2, ..TrainConfig::default() };
    let out = train(&data, &cfg).unwrap();
    let init = ModelParams::init(cfg.shape(), cfg.seed).unwrap();
    assert_eq!(out.params.values(), init.values());
    assert!(out.history.is_empty());
}

#[test]
fn training_is_reproducible() {
    let data = separable(24, 3);
    let cfg = TrainConfig { epochs: 3, d_model: 8, heads: 2, ..TrainConfig::default() };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
}

#[test]
fn degenerate_datasets_are_rejected() {
    let cfg = TrainConfig { epochs: 1, d_model: 8, heads: 2, ..TrainConfig::default() };
    assert!(train(&[], &cfg).is_err());
    let one_class: Vec<_> = separable(8, 4).into_iter().filter(|w| w.label == GestureClass::Push).collect();
    assert!(train(&one_class, &cfg).is_err());
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let data = separable(40, 5);
    let cfg = TrainConfig { epochs: 2, d_model: 8, heads: 2, ..TrainConfig::default() };
    let report = kfold_evaluate(&data, 2, |_, tr| Ok(train(tr, &cfg)?.params)).unwrap();
    for class in GestureClass::ALL {
        let truth = data.iter().filter(|w| w.label == class).count() as u64;
        let row: u64 = report.pooled.counts[class.code()].iter().sum();
        assert_eq!(row, truth);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let data = separable(16, 6);
    let cfg = TrainConfig { epochs: 2, d_model: 8, heads: 2, ..TrainConfig::default() };
    let params = train(&data, &cfg).unwrap().params;
    save_checkpoint(&params, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for w in &data {
        assert_eq!(params.forward(&w.window).unwrap(), back.forward(&w.window).unwrap());
    }
}
