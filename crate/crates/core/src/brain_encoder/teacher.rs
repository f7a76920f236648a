//! Random linear teacher standing in for measured responses: voxels are a
//! fixed linear function of the mean patch token, z-scored per voxel, plus
//! Gaussian noise.

use serde::{Deserialize, Serialize};

use super::roi::{FmriRecord, RoiMap};
use crate::error::{Error, Result};
use crate::image_encoder::ImageTokens;
use crate::numerics::rng::{derive_seed, normal, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTeacher {
    pub d_v: usize,
    pub roi_map: RoiMap,
    /// `[d_v][V]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub center: Vec<f32>,
    pub scale: Vec<f32>,
    pub sigma: f32,
    pub seed: u64,
}

fn gap(tokens: &ImageTokens) -> Vec<f64> {
    let (n, d) = (tokens.patches.rows(), tokens.patches.last_dim());
    let mut out = vec![0.0f64; d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(tokens.patches.row(i)) {
            *o += v as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

impl SyntheticTeacher {
    pub fn new(d_v: usize, roi_map: RoiMap, sigma: f32, seed: u64) -> Result<Self> {
        roi_map.validate()?;
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("teacher noise must be >= 0, got {sigma}")));
        }
        let v = roi_map.num_voxels();
        let mut rng = SeedStream(seed).split_str("teacher").rng();
        let std = 1.0 / (d_v as f32).sqrt();
        let weight = (0..d_v * v).map(|_| normal(&mut rng) * std).collect();
        let bias = (0..v).map(|_| normal(&mut rng) * 0.1).collect();
        Ok(Self {
            d_v,
            roi_map,
            weight,
            bias,
            center: vec![0.0; v],
            scale: vec![1.0; v],
            sigma,
            seed,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.roi_map.num_voxels()
    }

    fn raw(&self, tokens: &ImageTokens) -> Result<Vec<f64>> {
        if tokens.patches.last_dim() != self.d_v {
            return Err(Error::dim("teacher", tokens.patches.shape(), &[self.d_v]));
        }
        let g = gap(tokens);
        let v = self.num_voxels();
        let mut out: Vec<f64> = self.bias.iter().map(|&b| b as f64).collect();
        for (k, gk) in g.iter().enumerate() {
            let row = &self.weight[k * v..(k + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gk * w as f64;
            }
        }
        Ok(out)
    }

    /// Fits the per-voxel z-scoring on a reference set (the training split).
    pub fn fit_normalization(&mut self, reference: &[ImageTokens]) -> Result<()> {
        if reference.len() < 2 {
            return Err(Error::Input("teacher normalization needs at least two samples".into()));
        }
        let v = self.num_voxels();
        let raws = reference.iter().map(|t| self.raw(t)).collect::<Result<Vec<_>>>()?;
        let n = raws.len() as f64;
        for j in 0..v {
            let mean = raws.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = raws.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            self.center[j] = mean as f32;
            self.scale[j] = if var > 1e-20 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        }
        Ok(())
    }

    /// Noise-free response.
    pub fn clean(&self, tokens: &ImageTokens) -> Result<Vec<f32>> {
        Ok(self
            .raw(tokens)?
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(&r, (&c, &s))| ((r - c as f64) * s as f64) as f32)
            .collect())
    }

    /// Noisy response for sample `index`; the noise stream depends only on
    /// the teacher seed and the index.
    pub fn respond(&self, tokens: &ImageTokens, index: u64) -> Result<FmriRecord> {
        let mut voxels = self.clean(tokens)?;
        if self.sigma > 0.0 {
            let mut rng = SeedStream(derive_seed(self.seed, index)).split_str("noise").rng();
            voxels.iter_mut().for_each(|v| *v += self.sigma * normal(&mut rng));
        }
        FmriRecord::new(voxels, self.roi_map.clone())
    }

    /// `1 − σ² / var` per voxel, from the variance of the given responses,
    /// clipped to `[0.1, 1]`.
    pub fn noise_ceiling(&self, responses: &[FmriRecord]) -> Vec<f32> {
        let v = self.num_voxels();
        let n = responses.len().max(1) as f64;
        (0..v)
            .map(|j| {
                let mean = responses.iter().map(|r| r.voxels[j] as f64).sum::<f64>() / n;
                let var = responses.iter().map(|r| (r.voxels[j] as f64 - mean).powi(2)).sum::<f64>() / n;
                let nc = if var > 0.0 { 1.0 - (self.sigma as f64).powi(2) / var } else { 1.0 };
                nc.clamp(0.1, 1.0) as f32
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn tokens(seed: u64) -> ImageTokens {
        let mut rng = SeedStream(seed).rng();
        let data = (0..4 * 3).map(|_| normal(&mut rng)).collect();
        ImageTokens {
            cls: vec![0.0; 3],
            patches: Tensor::new(vec![4, 3], data).unwrap(),
        }
    }

    #[test]
    fn normalized_targets_have_unit_variance_and_ceiling() {
        let mut t = SyntheticTeacher::new(3, RoiMap::uniform(2), 0.1, 7).unwrap();
        let refs: Vec<_> = (0..400).map(tokens).collect();
        t.fit_normalization(&refs).unwrap();
        let clean: Vec<Vec<f32>> = refs.iter().map(|r| t.clean(r).unwrap()).collect();
        for j in 0..32 {
            let m = clean.iter().map(|c| c[j] as f64).sum::<f64>() / 400.0;
            let v = clean.iter().map(|c| (c[j] as f64 - m).powi(2)).sum::<f64>() / 400.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-3);
        }
        let noisy: Vec<_> = refs.iter().enumerate().map(|(i, r)| t.respond(r, i as u64).unwrap()).collect();
        let nc = t.noise_ceiling(&noisy);
        assert!(nc.iter().all(|&c| (0.97..=1.0).contains(&c)));
        assert_eq!(noisy[3], t.respond(&refs[3], 3).unwrap());
    }
}
