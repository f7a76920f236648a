use serde::Serialize;

use super::roi::FmriRecord;
use crate::error::{Error, Result};
use crate::objective::pearson_centered;

/// Noise-ceiling-normalized encoding quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodingScore {
    /// `mean(R² / NC) · 100` over voxels with a defined correlation.
    pub m: f64,
    pub mean_r: f64,
    /// Voxels skipped because truth or prediction had zero variance.
    pub excluded: usize,
}

/// Correlation across samples for every voxel; `None` where undefined.
pub fn voxel_correlations(pred: &[&[f32]], truth: &[&[f32]]) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::dim("voxel_correlations", &[pred.len()], &[truth.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Input("voxel correlations need at least two samples".into()));
    }
    let v = truth[0].len();
    if pred.iter().chain(truth).any(|r| r.len() != v) {
        return Err(Error::Input("records differ in voxel count".into()));
    }
    let mut px = vec![0.0f32; pred.len()];
    let mut tx = vec![0.0f32; pred.len()];
    (0..v)
        .map(|j| {
            for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
                px[i] = p[j];
                tx[i] = t[j];
            }
            match pearson_centered(&px, &tx) {
                Ok(r) => Ok(Some(r)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

pub fn encoding_score(pred: &[FmriRecord], truth: &[FmriRecord], noise_ceiling: &[f32]) -> Result<EncodingScore> {
    let p: Vec<&[f32]> = pred.iter().map(|r| r.voxels.as_slice()).collect();
    let t: Vec<&[f32]> = truth.iter().map(|r| r.voxels.as_slice()).collect();
    encoding_score_slices(&p, &t, noise_ceiling)
}

pub fn encoding_score_slices(pred: &[&[f32]], truth: &[&[f32]], noise_ceiling: &[f32]) -> Result<EncodingScore> {
    let rs = voxel_correlations(pred, truth)?;
    if noise_ceiling.len() != rs.len() {
        return Err(Error::dim("encoding_score", &[noise_ceiling.len()], &[rs.len()]));
    }
    if noise_ceiling.iter().any(|&nc| !(nc > 0.0)) {
        return Err(Error::Input("noise ceiling entries must be positive".into()));
    }
    let (mut sum, mut sum_r, mut n) = (0.0, 0.0, 0usize);
    for (r, &nc) in rs.iter().zip(noise_ceiling) {
        if let Some(r) = r {
            sum += r * r / nc as f64;
            sum_r += r;
            n += 1;
        }
    }
    let excluded = rs.len() - n;
    if excluded > 0 {
        log::warn!("{excluded} voxels with zero variance excluded from the encoding score");
    }
    if n == 0 {
        return Err(Error::Degenerate("every voxel has zero variance".into()));
    }
    Ok(EncodingScore {
        m: sum / n as f64 * 100.0,
        mean_r: sum_r / n as f64,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal, SeedStream};

    #[test]
    fn perfect_prediction_scores_100() {
        let truth: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, (i * i) as f32, -(i as f32)]).collect();
        let t: Vec<&[f32]> = truth.iter().map(Vec::as_slice).collect();
        let s = encoding_score_slices(&t, &t, &[1.0; 3]).unwrap();
        assert!((s.m - 100.0).abs() < 1e-9);
        assert_eq!(s.excluded, 0);
    }

    #[test]
    fn hand_case_matches_direct_evaluation() {
        // 3 samples, 2 voxels
        let pred = [[1.0f32, 0.5], [2.0, 0.1], [4.0, 0.3]];
        let truth = [[1.5f32, 1.0], [2.5, 3.0], [3.0, 2.0]];
        let nc = [0.8f32, 0.5];
        let oracle = |j: usize| {
            let x: Vec<f64> = pred.iter().map(|r| r[j] as f64).collect();
            let y: Vec<f64> = truth.iter().map(|r| r[j] as f64).collect();
            let mx = x.iter().sum::<f64>() / 3.0;
            let my = y.iter().sum::<f64>() / 3.0;
            let num: f64 = (0..3).map(|i| (x[i] - mx) * (y[i] - my)).sum();
            let dx: f64 = (0..3).map(|i| (x[i] - mx).powi(2)).sum::<f64>().sqrt();
            let dy: f64 = (0..3).map(|i| (y[i] - my).powi(2)).sum::<f64>().sqrt();
            num / (dx * dy)
        };
        let expected = (oracle(0).powi(2) / 0.8 + oracle(1).powi(2) / 0.5) / 2.0 * 100.0;
        let p: Vec<&[f32]> = pred.iter().map(|r| r.as_slice()).collect();
        let t: Vec<&[f32]> = truth.iter().map(|r| r.as_slice()).collect();
        let s = encoding_score_slices(&p, &t, &nc).unwrap();
        assert!((s.m - expected).abs() < 1e-6, "{} vs {expected}", s.m);
    }

    #[test]
    fn independent_prediction_scores_near_zero() {
        let mut rng = SeedStream(3).rng();
        let pred: Vec<Vec<f32>> = (0..4000).map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
        let truth: Vec<Vec<f32>> = (0..4000).map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
        let p: Vec<&[f32]> = pred.iter().map(Vec::as_slice).collect();
        let t: Vec<&[f32]> = truth.iter().map(Vec::as_slice).collect();
        assert!(encoding_score_slices(&p, &t, &[1.0; 4]).unwrap().m < 0.5);
    }

    #[test]
    fn constant_voxels_are_excluded() {
        let pred = [[1.0f32, 2.0], [2.0, 2.0], [3.0, 2.0]];
        let truth = [[1.0f32, 5.0], [2.0, 1.0], [3.5, 0.0]];
        let p: Vec<&[f32]> = pred.iter().map(|r| r.as_slice()).collect();
        let t: Vec<&[f32]> = truth.iter().map(|r| r.as_slice()).collect();
        let s = encoding_score_slices(&p, &t, &[1.0, 1.0]).unwrap();
        assert_eq!(s.excluded, 1);
        assert!(encoding_score_slices(&p, &t, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn positive_affine_predictions_keep_the_score() {
        let mut rng = SeedStream(8).rng();
        let truth: Vec<Vec<f32>> = (0..50).map(|_| (0..6).map(|_| normal(&mut rng)).collect()).collect();
        let pred: Vec<Vec<f32>> = truth
            .iter()
            .map(|r| r.iter().map(|v| v + 0.7 * normal(&mut rng)).collect())
            .collect();
        let moved: Vec<Vec<f32>> = pred.iter().map(|r| r.iter().map(|v| 2.5 * v + 1.25).collect()).collect();
        let t: Vec<&[f32]> = truth.iter().map(Vec::as_slice).collect();
        let a = encoding_score_slices(&pred.iter().map(Vec::as_slice).collect::<Vec<_>>(), &t, &[0.9; 6]).unwrap();
        let b = encoding_score_slices(&moved.iter().map(Vec::as_slice).collect::<Vec<_>>(), &t, &[0.9; 6]).unwrap();
        assert!((a.m - b.m).abs() < 1e-6 * a.m.max(1.0), "{} {}", a.m, b.m);
    }
}
