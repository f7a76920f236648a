use bmfl::brain_encoder::{
    evaluate_brain_encoder, pretrain_brain_encoder, BrainEncoder, BrainEncoderConfig, FmriRecord, SyntheticTeacher,
};
use bmfl::data::{generate_dataset, SyntheticDatasetSpec};
use bmfl::fit::PretrainOptions;
use bmfl::image_encoder::{pretrain_image_encoder, ImageEncoder, ImageEncoderConfig, ImageTokens};
use bmfl::numerics::{ParamStore, SeedStream};
use nalgebra::DMatrix;
use std::sync::OnceLock;

/// Tokens from a warmed-up image encoder, computed once per test binary.
fn encoded() -> &'static Vec<ImageTokens> {
    static TOKENS: OnceLock<Vec<ImageTokens>> = OnceLock::new();
    TOKENS.get_or_init(|| {
        let (train, _) = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, &ImageEncoderConfig::default(), SeedStream(4)).unwrap();
        pretrain_image_encoder(&mut store, &enc, &train, &PretrainOptions::default()).unwrap();
        let idx: Vec<usize> = (0..train.len()).collect();
        idx.chunks(128)
            .flat_map(|c| enc.encode(&store, &train.batch(c).unwrap()).unwrap())
            .collect()
    })
}

fn tokens(n: usize) -> Vec<ImageTokens> {
    encoded()[..n].to_vec()
}

fn gap_design(tokens: &[ImageTokens]) -> DMatrix<f64> {
    let d = tokens[0].patches.last_dim();
    let n = tokens[0].patches.rows();
    DMatrix::from_fn(tokens.len(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (0..n).map(|r| tokens[i].patches.row(r)[j] as f64).sum::<f64>() / n as f64
        }
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn pairs(tokens: &[ImageTokens], sigma: f32) -> (SyntheticTeacher, Vec<(ImageTokens, FmriRecord)>) {
    let cfg = BrainEncoderConfig::default();
    let mut teacher = SyntheticTeacher::new(64, cfg.default_map().unwrap(), sigma, 11).unwrap();
    teacher.fit_normalization(tokens).unwrap();
    let pairs = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), teacher.respond(t, i as u64).unwrap()))
        .collect();
    (teacher, pairs)
}

#[test]
fn least_squares_reaches_high_voxel_correlation() {
    let toks = tokens(800);
    let (_, pairs) = pairs(&toks, 0.1);
    let x = gap_design(&toks);
    let y = DMatrix::from_fn(toks.len(), 3072, |i, j| pairs[i].1.voxels[j] as f64);
    let beta = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let fit = &x * beta;
    let mean_r: f64 = (0..3072)
        .map(|j| {
            let a: Vec<f64> = fit.column(j).iter().copied().collect();
            let b: Vec<f64> = y.column(j).iter().copied().collect();
            pearson(&a, &b)
        })
        .sum::<f64>()
        / 3072.0;
    eprintln!("least squares mean voxel R {mean_r:.4}");
    assert!(mean_r >= 0.9);
}

fn brain_opts(epochs: usize, peak_lr: f64) -> PretrainOptions {
    let mut opts = PretrainOptions {
        epochs,
        peak_lr,
        ..Default::default()
    };
    opts.optimizer.weight_decay = 0.0;
    opts
}

#[test]
fn noisy_teacher_is_learned_with_high_voxel_correlation() {
    let toks = tokens(1000);
    let (train_toks, val_toks) = toks.split_at(800);
    let (teacher, all) = pairs(&toks, 0.1);
    let _ = teacher;
    let (train, val) = all.split_at(train_toks.len());
    assert_eq!(val.len(), val_toks.len());
    let cfg = BrainEncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = BrainEncoder::new(&mut store, &cfg, cfg.default_map().unwrap(), SeedStream(1)).unwrap();
    let report = pretrain_brain_encoder(&mut store, &enc, train, &brain_opts(30, 5e-3)).unwrap();
    let (_, _, val_r) = evaluate_brain_encoder(&store, &enc, val).unwrap();
    eprintln!("train R {:.4} val R {val_r:.4} mse {:.4}", report.mean_r, report.final_mse);
    assert!(report.mean_r >= 0.8);
    assert!(val_r >= 0.8);
    for w in report.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{:?}", report.epoch_losses);
    }
    assert_eq!(report.roi_r.len(), 16);
    assert!(store.trainable().is_empty());
}

#[test]
fn noiseless_teacher_is_fit_almost_exactly() {
    let toks = tokens(800);
    let (_, pairs) = pairs(&toks, 0.0);
    let cfg = BrainEncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = BrainEncoder::new(&mut store, &cfg, cfg.default_map().unwrap(), SeedStream(1)).unwrap();
    let opts = brain_opts(100, 1e-2);
    let report = pretrain_brain_encoder(&mut store, &enc, &pairs, &opts).unwrap();
    eprintln!("noiseless mse {:.6}", report.final_mse);
    assert!(report.final_mse <= 1e-3, "{}", report.final_mse);
}
