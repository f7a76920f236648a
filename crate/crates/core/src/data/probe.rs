//! Multinomial logistic regression on fixed feature vectors. Used to check
//! that a representation (raw pixels, frozen encoder tokens, predicted
//! responses) carries label information.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    /// Full-batch gradient descent on standardized features.
    pub fn fit(features: &[Vec<f32>], labels: &[usize], classes: usize, opts: ProbeOptions) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Input("probe needs one label per feature row".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Input("ragged probe features".into()));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::Input("probe label out of range".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for ((s, &v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = LinearProbe {
            mean,
            scale,
            weights: vec![vec![0.0; dim + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for _ in 0..opts.epochs {
            grad.iter_mut().for_each(|g| g.fill(0.0));
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probs_std(x);
                for (c, g) in grad.iter_mut().enumerate() {
                    let delta = p[c] - if c == y { 1.0 } else { 0.0 };
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += delta * xi / n;
                    }
                    g[dim] += delta / n;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for i in 0..dim {
                    w[i] -= opts.lr * (g[i] + opts.l2 * w[i]);
                }
                w[dim] -= opts.lr * g[dim];
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f32]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }

    fn probs_std(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[dim])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn predict(&self, f: &[f32]) -> usize {
        let p = self.probs_std(&self.standardize(f));
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / features.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_are_learned() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let jitter = (i as f32 * 0.37).sin() * 0.2;
            xs.push(vec![c as f32 + jitter, (2 - c) as f32 - jitter, 0.5]);
            ys.push(c);
        }
        let probe = LinearProbe::fit(&xs, &ys, 3, ProbeOptions::default()).unwrap();
        assert_eq!(probe.accuracy(&xs, &ys), 1.0);
    }

    #[test]
    fn label_range_checked() {
        assert!(LinearProbe::fit(&[vec![0.0]], &[2], 2, ProbeOptions::default()).is_err());
    }
}
