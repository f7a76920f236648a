use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::roi::{FmriRecord, RoiMap};
use super::scoring::voxel_correlations;
use crate::error::{Error, Result};
use crate::fit::{copy_prefix, train_loop, PretrainOptions};
use crate::image_encoder::ImageTokens;
use crate::numerics::nn::{DecoderBlock, Linear};
use crate::numerics::{ParamId, ParamStore, SeedStream, Tape, Tensor, Var};

pub const PREFIX: &str = "brain_encoder";
const WHITEN: &str = "input_whitening";
/// Eigenvalues below this fraction of the largest are not amplified further.
const WHITEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrainEncoderConfig {
    /// One learned query per ROI.
    pub num_queries: usize,
    pub depth: usize,
    pub d_model: usize,
    /// Width of the incoming patch tokens.
    pub d_in: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Total voxel count.
    pub voxels: usize,
    pub frozen: bool,
}

impl Default for BrainEncoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 16,
            depth: 2,
            d_model: 64,
            d_in: 64,
            heads: 4,
            mlp_ratio: 2,
            voxels: 3072,
            frozen: true,
        }
    }
}

impl BrainEncoderConfig {
    pub fn validate(&self, map: &RoiMap) -> Result<()> {
        map.validate()?;
        if self.num_queries != map.len() {
            return Err(Error::Config(format!(
                "{} decoder queries for {} ROIs",
                self.num_queries,
                map.len()
            )));
        }
        if self.voxels != map.num_voxels() {
            return Err(Error::Config(format!(
                "configured {} voxels but the ROI map covers {}",
                self.voxels,
                map.num_voxels()
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// The default map: equal slices for every query.
    pub fn default_map(&self) -> Result<RoiMap> {
        if self.num_queries != 16 || !self.voxels.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "no default ROI map for {} queries over {} voxels",
                self.num_queries, self.voxels
            )));
        }
        Ok(RoiMap::uniform(self.voxels / 16))
    }
}

/// Query decoder over image patch tokens with one regression head per ROI.
#[derive(Debug, Clone)]
pub struct BrainEncoder {
    pub cfg: BrainEncoderConfig,
    pub roi_map: RoiMap,
    /// Fixed input whitening `(x + shift) · whiten`, fitted before training.
    pub shift: ParamId,
    pub whiten: ParamId,
    pub input: Linear,
    pub queries: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub heads: Vec<Linear>,
}

impl BrainEncoder {
    pub fn new(store: &mut ParamStore, cfg: &BrainEncoderConfig, roi_map: RoiMap, seed: SeedStream) -> Result<Self> {
        cfg.validate(&roi_map)?;
        let seed = seed.split_str(PREFIX);
        let d = cfg.d_model;
        let shift = store.init_const(&format!("{PREFIX}.{WHITEN}.shift"), &[cfg.d_in], 0.0)?;
        let mut eye = Tensor::zeros(&[cfg.d_in, cfg.d_in]);
        (0..cfg.d_in).for_each(|i| eye.data_mut()[i * cfg.d_in + i] = 1.0);
        let whiten = store.insert(&format!("{PREFIX}.{WHITEN}.matrix"), eye)?;
        store.get_mut(shift).set_requires_grad(false);
        store.get_mut(whiten).set_requires_grad(false);
        let input = Linear::new(store, &format!("{PREFIX}.input"), cfg.d_in, d, seed)?;
        let queries = store.init_normal(&format!("{PREFIX}.queries"), &[cfg.num_queries, d], seed)?;
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock::new(store, &format!("{PREFIX}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio, seed))
            .collect::<Result<Vec<_>>>()?;
        let heads = roi_map
            .entries
            .iter()
            .map(|e| Linear::new(store, &format!("{PREFIX}.head.{}", e.name()), d, e.len(), seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            roi_map,
            shift,
            whiten,
            input,
            queries,
            blocks,
            heads,
        })
    }

    /// `patches: [B, N_p, d_in]` to voxels `[B, V]` in ROI-map order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let (b, _, d_in) = match *tape.shape(patches) {
            [b, n, d] => (b, n, d),
            _ => return Err(Error::dim("predict_fmri", tape.shape(patches), &[])),
        };
        if d_in != self.cfg.d_in {
            return Err(Error::dim("predict_fmri", tape.shape(patches), &[self.cfg.d_in]));
        }
        let shift = tape.param(store, self.shift);
        let whiten = tape.param(store, self.whiten);
        let centered = tape.add(patches, shift)?;
        let white = tape.linear(centered, whiten, None)?;
        let memory = self.input.forward(tape, store, white)?;
        let zeros = tape.constant(Tensor::zeros(&[b, self.cfg.num_queries, self.cfg.d_model]));
        let q = tape.param(store, self.queries);
        let mut x = tape.add(zeros, q)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, memory)?;
        }
        let mut slices = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let token = tape.select_token(x, i)?;
            slices.push(head.forward(tape, store, token)?);
        }
        tape.concat(&slices)
    }

    /// Gradient-free prediction for a `[B, N_p, d_in]` batch.
    pub fn predict_batch(&self, store: &ParamStore, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(patches.clone());
        let out = self.forward(&mut tape, store, p)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_fmri(&self, store: &ParamStore, tokens: &ImageTokens) -> Result<FmriRecord> {
        let mut shape = vec![1];
        shape.extend_from_slice(tokens.patches.shape());
        let out = self.predict_batch(store, &tokens.patches.reshaped(&shape)?)?;
        FmriRecord::new(out.into_data(), self.roi_map.clone())
    }
}

impl BrainEncoder {
    /// Sets the fixed whitening from the covariance of all patch tokens in
    /// `patches: [B, N_p, d_in]`. Directions with tiny variance are
    /// regularized by a floor relative to the largest eigenvalue.
    pub fn fit_whitening(&self, store: &mut ParamStore, patches: &Tensor) -> Result<()> {
        let d = self.cfg.d_in;
        if patches.last_dim() != d || patches.rows() < 2 {
            return Err(Error::dim("fit_whitening", patches.shape(), &[d]));
        }
        let rows = patches.rows();
        let mut mean = vec![0.0f64; d];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(patches.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0f64; d];
        for r in 0..rows {
            for ((c, &v), m) in centered.iter_mut().zip(patches.row(r)).zip(&mean) {
                *c = v as f64 - m;
            }
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= rows as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if !(top > 0.0) {
            return Err(Error::Degenerate("patch tokens have zero variance".into()));
        }
        let floor = top * WHITEN_FLOOR;
        let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + floor).sqrt()));
        let w = &eig.eigenvectors * inv * eig.eigenvectors.transpose();
        let shift = store.get_mut(self.shift);
        shift.data_mut().iter_mut().zip(&mean).for_each(|(s, m)| *s = -m as f32);
        let mat = store.get_mut(self.whiten);
        for i in 0..d {
            for j in 0..d {
                mat.data_mut()[i * d + j] = w[(i, j)] as f32;
            }
        }
        Ok(())
    }
}

/// Stacks the patch matrices of several token sets into `[B, N_p, d]`.
pub fn stack_patches<'a>(tokens: impl IntoIterator<Item = &'a ImageTokens>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0;
    for t in tokens {
        match &shape {
            None => shape = Some(t.patches.shape().to_vec()),
            Some(s) if s.as_slice() != t.patches.shape() => {
                return Err(Error::dim("stack_patches", s, t.patches.shape()));
            }
            _ => {}
        }
        data.extend_from_slice(t.patches.data());
        count += 1;
    }
    let shape = shape.ok_or_else(|| Error::Input("no token sets to stack".into()))?;
    Tensor::new(vec![count, shape[0], shape[1]], data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrainPretrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_mse: f64,
    /// Mean voxel correlation per ROI, in map order.
    pub roi_r: Vec<(String, f64)>,
    pub mean_r: f64,
}

/// Mean squared error and voxelwise correlations of the encoder on a set of
/// pairs.
pub fn evaluate_brain_encoder(
    store: &ParamStore,
    encoder: &BrainEncoder,
    pairs: &[(ImageTokens, FmriRecord)],
) -> Result<(f64, Vec<(String, f64)>, f64)> {
    let mut preds = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(128) {
        let out = encoder.predict_batch(store, &stack_patches(chunk.iter().map(|(t, _)| t))?)?;
        let v = encoder.cfg.voxels;
        preds.extend(out.data().chunks(v).map(<[f32]>::to_vec));
    }
    let mut se = 0.0f64;
    for (p, (_, rec)) in preds.iter().zip(pairs) {
        se += p.iter().zip(&rec.voxels).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    let mse = se / (pairs.len() * encoder.cfg.voxels) as f64;
    let p: Vec<&[f32]> = preds.iter().map(Vec::as_slice).collect();
    let t: Vec<&[f32]> = pairs.iter().map(|(_, r)| r.voxels.as_slice()).collect();
    let rs = voxel_correlations(&p, &t)?;
    let mean_of = |range: std::ops::Range<usize>| {
        let vals: Vec<f64> = rs[range].iter().flatten().copied().collect();
        if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
    };
    let roi_r = encoder
        .roi_map
        .entries
        .iter()
        .map(|e| (e.name(), mean_of(e.range())))
        .collect();
    Ok((mse, roi_r, mean_of(0..rs.len())))
}

/// Fits the decoder to target responses by mean squared error. The
/// encoder's frozen flag is applied to the store on return.
pub fn pretrain_brain_encoder(
    store: &mut ParamStore,
    encoder: &BrainEncoder,
    pairs: &[(ImageTokens, FmriRecord)],
    opts: &PretrainOptions,
) -> Result<BrainPretrainReport> {
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    for (_, rec) in pairs {
        if rec.len() != encoder.cfg.voxels || rec.roi_map != encoder.roi_map {
            return Err(Error::Input(format!(
                "record with {} voxels does not match the encoder's {}-voxel ROI map",
                rec.len(),
                encoder.cfg.voxels
            )));
        }
    }
    let patches = stack_patches(pairs.iter().map(|(t, _)| t))?;
    let (n, np, d) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
    let v = encoder.cfg.voxels;
    let targets: Vec<f32> = pairs.iter().flat_map(|(_, r)| r.voxels.iter().copied()).collect();

    if opts.epochs > 0 {
        encoder.fit_whitening(store, &patches)?;
    }
    let mut scratch = ParamStore::new();
    let enc = BrainEncoder::new(&mut scratch, &encoder.cfg, encoder.roi_map.clone(), SeedStream(0))?;
    copy_prefix(store, &mut scratch, PREFIX)?;
    let epoch_losses = train_loop(&mut scratch, n, opts, |tape, s, batch| {
        let mut x = Vec::with_capacity(batch.len() * np * d);
        let mut y = Vec::with_capacity(batch.len() * v);
        for &i in batch {
            x.extend_from_slice(&patches.data()[i * np * d..(i + 1) * np * d]);
            y.extend_from_slice(&targets[i * v..(i + 1) * v]);
        }
        let x = tape.constant(Tensor::new(vec![batch.len(), np, d], x)?);
        let y = tape.constant(Tensor::new(vec![batch.len(), v], y)?);
        let pred = enc.forward(tape, s, x)?;
        tape.mse(pred, y)
    })?;
    copy_prefix(&scratch, store, PREFIX)?;
    store.set_frozen(&format!("{PREFIX}."), encoder.cfg.frozen);
    store.set_frozen(&format!("{PREFIX}.{WHITEN}."), true);

    let (final_mse, roi_r, mean_r) = evaluate_brain_encoder(store, encoder, pairs)?;
    Ok(BrainPretrainReport {
        epoch_losses,
        final_mse,
        roi_r,
        mean_r,
    })
}
