//! Training objective: cross-entropy on the class logits plus a weighted
//! Pearson-correlation term between the image-query and brain-query fused
//! features. The weight `alpha` is non-positive, so minimizing the total
//! pushes the correlation up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, Tape, Tensor, Var};

/// Relative threshold under which a variance term counts as zero.
const DEGENERATE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub enabled_fusion_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: -0.4,
            enabled_fusion_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha > 0.0 {
            return Err(Error::Config(format!(
                "alpha must be a finite value <= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Weight actually applied to the correlation term.
    pub fn effective_alpha(&self) -> f64 {
        if self.enabled_fusion_loss {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Loss components of one batch, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_fusion: f64,
    pub l_total: f64,
    /// Samples whose correlation was undefined and contributed 0.
    pub degenerate: usize,
}

// ---------------------------------------------------------------------------
// Pearson correlation

/// Sufficient statistics of one pair of equally long vectors.
#[derive(Debug, Clone, Copy)]
struct PairSums {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl PairSums {
    fn new(x: &[f32], y: &[f32]) -> Self {
        let mut s = PairSums {
            n: x.len() as f64,
            sx: 0.0,
            sy: 0.0,
            sxx: 0.0,
            syy: 0.0,
            sxy: 0.0,
        };
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (a as f64, b as f64);
            s.sx += a;
            s.sy += b;
            s.sxx += a * a;
            s.syy += b * b;
            s.sxy += a * b;
        }
        s
    }

    /// `n·Σx² − (Σx)²`, or `None` when it is zero up to rounding.
    fn spread_x(&self) -> Option<f64> {
        let d = self.n * self.sxx - self.sx * self.sx;
        (d > DEGENERATE_TOL * self.n * self.sxx).then_some(d)
    }

    fn spread_y(&self) -> Option<f64> {
        let d = self.n * self.syy - self.sy * self.sy;
        (d > DEGENERATE_TOL * self.n * self.syy).then_some(d)
    }

    /// Single-pass correlation
    /// `(nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))`, clamped to [-1, 1].
    fn correlation(&self) -> Option<f64> {
        let (dx, dy) = (self.spread_x()?, self.spread_y()?);
        let r = (self.n * self.sxy - self.sx * self.sy) / (dx * dy).sqrt();
        Some(r.clamp(-1.0, 1.0))
    }
}

fn check_pair(x: &[f32], y: &[f32]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim("pcc", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Input(format!("pcc needs n >= 2, got {}", x.len())));
    }
    Ok(())
}

/// Pearson correlation in the single-pass (sum, sum of squares, sum of
/// products) form used for the training regularizer.
pub fn pcc(x: &[f32], y: &[f32]) -> Result<f64> {
    check_pair(x, y)?;
    PairSums::new(x, y)
        .correlation()
        .ok_or_else(|| Error::Degenerate("zero variance in pcc input".into()))
}

/// Pearson correlation from mean-centered sums. Used for voxelwise encoding
/// scores; agrees with [`pcc`] up to rounding.
pub fn pearson_centered(x: &[f32], y: &[f32]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64 - mx, b as f64 - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    let scale_x = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    let scale_y = y.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    if sxx <= DEGENERATE_TOL * scale_x || syy <= DEGENERATE_TOL * scale_y {
        return Err(Error::Degenerate("zero variance in pearson input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn rows_of<'a>(t: &'a Tensor, what: &'static str) -> Result<(usize, usize, &'a [f32])> {
    match *t.shape() {
        [b, d] => Ok((b, d, t.data())),
        _ => Err(Error::dim(what, t.shape(), &[])),
    }
}

/// Per-sample correlation across the feature axis, averaged over the batch.
/// Degenerate samples contribute 0; their count is returned alongside.
pub fn fusion_loss(x_vb: &Tensor, x_bv: &Tensor) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(x_vb.clone()), tape.constant(x_bv.clone()));
    let (v, degenerate) = fusion_loss_var(&mut tape, x, y)?;
    Ok((tape.value(v).data()[0] as f64, degenerate))
}

struct PccRows {
    /// Per row: (r, mean_x, mean_y, centered Σx̃², centered Σỹ²); `None` if degenerate.
    rows: Vec<Option<(f64, f64, f64, f64, f64)>>,
}

impl CustomBackward for PccRows {
    fn name(&self) -> &'static str {
        "pcc_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let d = x.last_dim();
        let mut dx = vec![0.0; x.len()];
        let mut dy = vec![0.0; y.len()];
        for (b, row) in self.rows.iter().enumerate() {
            let Some((r, mx, my, cxx, cyy)) = *row else { continue };
            let g = grad[b] as f64;
            let inv = 1.0 / (cxx * cyy).sqrt();
            for j in 0..d {
                let xt = x.data()[b * d + j] as f64 - mx;
                let yt = y.data()[b * d + j] as f64 - my;
                dx[b * d + j] = (g * (yt * inv - r * xt / cxx)) as f32;
                dy[b * d + j] = (g * (xt * inv - r * yt / cyy)) as f32;
            }
        }
        vec![Some(dx), Some(dy)]
    }
}

/// Per-row correlations of two `[B, d]` matrices as a `[B]` tape value.
pub fn pcc_rows_var(tape: &mut Tape, x: Var, y: Var) -> Result<(Var, usize)> {
    let (xt, yt) = (tape.value(x), tape.value(y));
    if xt.shape() != yt.shape() {
        return Err(Error::dim("pcc_rows", xt.shape(), yt.shape()));
    }
    let (b, d, xd) = rows_of(xt, "pcc_rows")?;
    if d < 2 {
        return Err(Error::Input(format!("pcc needs at least 2 features, got {d}")));
    }
    let yd = yt.data();
    let mut values = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b);
    let mut degenerate = 0;
    for i in 0..b {
        let s = PairSums::new(&xd[i * d..(i + 1) * d], &yd[i * d..(i + 1) * d]);
        match s.correlation() {
            Some(r) => {
                let n = s.n;
                values.push(r as f32);
                rows.push(Some((
                    r,
                    s.sx / n,
                    s.sy / n,
                    s.spread_x().unwrap_or(0.0) / n,
                    s.spread_y().unwrap_or(0.0) / n,
                )));
            }
            None => {
                degenerate += 1;
                values.push(0.0);
                rows.push(None);
            }
        }
    }
    let out = Tensor::new(vec![b], values)?;
    Ok((tape.custom(&[x, y], out, Box::new(PccRows { rows })), degenerate))
}

/// Batch-mean correlation between the two fused features.
pub fn fusion_loss_var(tape: &mut Tape, x_vb: Var, x_bv: Var) -> Result<(Var, usize)> {
    let (rows, degenerate) = pcc_rows_var(tape, x_vb, x_bv)?;
    if degenerate > 0 {
        log::warn!("{degenerate} sample(s) with zero-variance fused features contribute 0 to the correlation term");
    }
    Ok((tape.mean(rows), degenerate))
}

// ---------------------------------------------------------------------------
// Cross-entropy

struct CrossEntropyRule {
    probs: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl CustomBackward for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let b = self.labels.len();
        let scale = grad[0] / b as f32;
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * self.classes + y] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(d)]
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = tape.value(logits);
    let (b, c, z) = rows_of(t, "cross_entropy")?;
    if labels.len() != b || b == 0 {
        return Err(Error::dim("cross_entropy labels", t.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} outside [0, {c})")));
    }
    let mut probs = vec![0.0f32; b * c];
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &z[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y] as f64;
        for j in 0..c {
            probs[i * c + j] = ((row[j] as f64 - lse).exp()) as f32;
        }
    }
    let out = Tensor::scalar((total / b as f64) as f32);
    let rule = CrossEntropyRule {
        probs,
        labels: labels.to_vec(),
        classes: c,
    };
    Ok(tape.custom(&[logits], out, Box::new(rule)))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = cross_entropy_var(&mut tape, z, labels)?;
    Ok(tape.value(l).data()[0] as f64)
}

// ---------------------------------------------------------------------------
// Total

/// Tape handle to the total loss together with its logged components.
pub struct LossVars {
    pub total: Var,
    pub report: LossReport,
}

/// `l_total = l_cls + alpha · l_fusion`. With the correlation term disabled
/// or `alpha == 0` the total is the cross-entropy node itself; the
/// correlation is still measured for logging but is not on the gradient
/// path. `fused` is absent for variants without cross-attention.
pub fn total_loss_var(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    fused: Option<(Var, Var)>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let cls = cross_entropy_var(tape, logits, labels)?;
    let l_cls = tape.value(cls).data()[0] as f64;
    let alpha = cfg.effective_alpha();
    let (fusion, degenerate) = match fused {
        Some((x_vb, x_bv)) => {
            let (f, n) = fusion_loss_var(tape, x_vb, x_bv)?;
            (Some(f), n)
        }
        None => (None, 0),
    };
    let l_fusion = fusion.map_or(0.0, |f| tape.value(f).data()[0] as f64);
    let total = match fusion {
        Some(f) if alpha != 0.0 => {
            let weighted = tape.scale(f, alpha as f32);
            tape.add(cls, weighted)?
        }
        _ => cls,
    };
    let l_total = tape.value(total).data()[0] as f64;
    Ok(LossVars {
        total,
        report: LossReport {
            l_cls,
            l_fusion,
            l_total,
            degenerate,
        },
    })
}

/// Tape-free evaluation of [`total_loss_var`].
pub fn total_loss(
    logits: &Tensor,
    labels: &[usize],
    fused: Option<(&Tensor, &Tensor)>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let fused = fused.map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())));
    Ok(total_loss_var(&mut tape, z, labels, fused, cfg)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore, SeedStream};
    use proptest::prelude::*;

    /// Textbook two-pass correlation, kept independent of both library routes.
    fn oracle_pcc(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
        let dy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
        num / (dx * dy)
    }

    #[test]
    fn pcc_examples() {
        let x = [0.3f32, -1.2, 2.5, 0.0, 4.1];
        assert!((pcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert!((pcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        // hand oracle: x̄ = 2, ȳ = 13/3; Σx̃ỹ = 5, Σx̃² = 2, Σỹ² = 38/3
        let expected = 5.0 / (2.0f64.sqrt() * (38.0f64 / 3.0).sqrt());
        let r = pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        assert!((r - expected).abs() < 1e-7, "{r} vs {expected}");
        assert!((r - oracle_pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0])).abs() < 1e-7);
    }

    #[test]
    fn pcc_errors() {
        assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pcc(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(pcc(&[1.0], &[1.0]), Err(Error::Input(_))));
        assert!(matches!(pcc(&[1.0, 2.0], &[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(
            pearson_centered(&[0.25; 4], &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn fusion_loss_examples() {
        let x = Tensor::from_rows(&[vec![0.1, 0.5, -0.3], vec![2.0, -1.0, 0.0]]);
        let neg = Tensor::from_rows(&[vec![-0.1, -0.5, 0.3], vec![-2.0, 1.0, 0.0]]);
        assert!((fusion_loss(&x, &x).unwrap().0 - 1.0).abs() < 1e-6);
        assert!((fusion_loss(&x, &neg).unwrap().0 + 1.0).abs() < 1e-6);

        let mut rng = SeedStream(5).rng();
        let a: Vec<f32> = (0..15).map(|_| crate::numerics::rng::normal(&mut rng)).collect();
        let b: Vec<f32> = (0..15).map(|_| crate::numerics::rng::normal(&mut rng)).collect();
        let expected: f64 = (0..3)
            .map(|i| {
                let xs: Vec<f64> = a[i * 5..i * 5 + 5].iter().map(|&v| v as f64).collect();
                let ys: Vec<f64> = b[i * 5..i * 5 + 5].iter().map(|&v| v as f64).collect();
                oracle_pcc(&xs, &ys)
            })
            .sum::<f64>()
            / 3.0;
        let (got, deg) = fusion_loss(
            &Tensor::new(vec![3, 5], a).unwrap(),
            &Tensor::new(vec![3, 5], b).unwrap(),
        )
        .unwrap();
        assert_eq!(deg, 0);
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn degenerate_rows_contribute_zero() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0]]);
        let y = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let (v, deg) = fusion_loss(&x, &y).unwrap();
        assert_eq!(deg, 1);
        assert!((v - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::from_rows(&[vec![0.3; 4], vec![-2.0; 4]]);
        assert!((cross_entropy(&uniform, &[1, 3]).unwrap() - 4.0f64.ln()).abs() < 1e-6);
        let sharp = Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]);
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-12);
        // brute force: softmax then log
        let z = [[0.5f64, -1.0, 2.0], [1.0, 1.0, -0.5]];
        let labels = [2usize, 0];
        let mut expected = 0.0;
        for (row, &y) in z.iter().zip(&labels) {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            expected -= (e[y] / s).ln();
        }
        expected /= 2.0;
        let t = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, -0.5]]);
        assert!((cross_entropy(&t, &labels).unwrap() - expected).abs() < 1e-6);
        assert!(matches!(cross_entropy(&t, &[3, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn total_loss_examples() {
        let logits = Tensor::from_rows(&[vec![0.2, -0.1, 0.4], vec![1.0, 0.0, -1.0]]);
        let a = Tensor::from_rows(&[vec![0.1, 0.5, -0.3, 0.2], vec![2.0, -1.0, 0.0, 0.5]]);
        let b = Tensor::from_rows(&[vec![0.0, 0.4, 0.1, 0.2], vec![1.0, -1.5, 0.3, 0.0]]);
        let zero = LossConfig {
            alpha: 0.0,
            enabled_fusion_loss: true,
        };
        let r = total_loss(&logits, &[0, 1], Some((&a, &b)), &zero).unwrap();
        assert_eq!(r.l_total, r.l_cls);

        let cfg = LossConfig::default();
        let r = total_loss(&logits, &[0, 1], Some((&a, &b)), &cfg).unwrap();
        assert!((r.l_total - (r.l_cls - 0.4 * r.l_fusion)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&r.l_fusion));

        let bad = LossConfig {
            alpha: 0.1,
            enabled_fusion_loss: true,
        };
        assert!(matches!(total_loss(&logits, &[0, 1], Some((&a, &b)), &bad), Err(Error::Config(_))));

        let off = LossConfig {
            alpha: -0.4,
            enabled_fusion_loss: false,
        };
        let r = total_loss(&logits, &[0, 1], Some((&a, &b)), &off).unwrap();
        assert_eq!(r.l_total, r.l_cls);
    }

    #[test]
    fn eq11_arithmetic() {
        // 1.0 + (-0.4)(0.5)
        let cfg = LossConfig::default();
        assert!((1.0 + cfg.alpha * 0.5 - 0.8f64).abs() < 1e-15);
    }

    #[test]
    fn total_loss_gradient_matches_differences() {
        let mut store = ParamStore::new();
        let seed = SeedStream(9);
        let xs = store.init_normal("x_vb", &[3, 5], seed).unwrap();
        let ys = store.init_normal("x_bv", &[3, 5], seed).unwrap();
        let zs = store.init_normal("logits", &[3, 4], seed).unwrap();
        for id in [xs, ys, zs] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 50.0);
        }
        let cfg = LossConfig::default();
        let report = grad_check(&mut store, &[xs, ys, zs], 1e-3, |tape, s| {
            let (x, y, z) = (tape.param(s, xs), tape.param(s, ys), tape.param(s, zs));
            Ok(total_loss_var(tape, z, &[0, 3, 1], Some((x, y)), &cfg)?.total)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-3, "{report:?}");
    }

    proptest! {
        #[test]
        fn single_pass_matches_centered(
            pairs in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 2..64)
        ) {
            let (x, y): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (pcc(&x, &y), pearson_centered(&x, &y)) {
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((pcc(&y, &x).unwrap() - a).abs() < 1e-7);
            }
        }

        #[test]
        fn affine_invariance(
            pairs in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 3..32),
            scale in 0.1f32..10.0,
            shift in -3.0f32..3.0,
        ) {
            let (x, y): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            if let Ok(r) = pcc(&x, &y) {
                let ax: Vec<f32> = x.iter().map(|v| scale * v + shift).collect();
                let nx: Vec<f32> = x.iter().map(|v| -scale * v + shift).collect();
                prop_assert!((pcc(&ax, &y).unwrap() - r).abs() < 1e-5);
                prop_assert!((pcc(&nx, &y).unwrap() + r).abs() < 1e-5);
            }
        }
    }
}
