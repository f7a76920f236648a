//! Assembly of the full model in one parameter store, backbone warm-up and
//! cached frozen features.

use std::ops::Range;

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Variant};
use crate::brain_encoder::{
    self, evaluate_brain_encoder, pretrain_brain_encoder, BrainEncoder, BrainPretrainReport, FmriRecord,
    RoiSubset, SyntheticTeacher,
};
use crate::brain_transformer::{self, BrainTransformer};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::fit::copy_prefix;
use crate::fusion::{self, FusionModel, FusionVars};
use crate::image_encoder::{self, pretrain_image_encoder, ImageEncoder, ImagePretrainReport, ImageTokens};
use crate::numerics::{ParamStore, SeedStream, Tape, Tensor, Var};

/// Rows per forward pass when encoding whole datasets.
const CHUNK: usize = 64;

/// Predicted-fMRI branch: frozen decoder, voxel selection, brain transformer.
#[derive(Debug, Clone)]
pub struct BrainBranch {
    pub encoder: BrainEncoder,
    pub transformer: BrainTransformer,
    /// Voxel ranges fed to the transformer; `None` keeps every voxel.
    pub ranges: Option<Vec<Range<usize>>>,
}

#[derive(Debug, Clone)]
pub struct BmflModel {
    pub store: ParamStore,
    pub variant: Variant,
    pub image: ImageEncoder,
    pub brain: Option<BrainBranch>,
    pub fusion: FusionModel,
}

impl BmflModel {
    /// Freshly initialized model for `cfg`. Backbone weights are random until
    /// [`load_backbones`](Self::load_backbones) is called.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let variant = cfg.variant()?;
        let seed = SeedStream(cfg.seed).split_str("model");
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, &cfg.image, seed)?;
        let fusion_cfg = cfg.effective_fusion();
        let brain = if fusion_cfg.use_fmri {
            let map = cfg.brain_encoder.default_map()?;
            let (ranges, sub) = map.select(cfg.ablation.roi)?;
            let encoder = BrainEncoder::new(&mut store, &cfg.brain_encoder, map, seed)?;
            let transformer = BrainTransformer::new(&mut store, &cfg.brain_transformer, sub.num_voxels(), seed)?;
            Some(BrainBranch {
                encoder,
                transformer,
                ranges: (cfg.ablation.roi != RoiSubset::All).then_some(ranges),
            })
        } else {
            None
        };
        let fusion = FusionModel::new(&mut store, &fusion_cfg, cfg.image.d_v, cfg.brain_transformer.d_b, seed)?;
        let mut model = Self {
            store,
            variant,
            image,
            brain,
            fusion,
        };
        model.apply_frozen_flags(cfg);
        Ok(model)
    }

    /// [`init`](Self::init) followed by copying the warmed-up backbones.
    pub fn build(cfg: &RunConfig, backbones: &ParamStore) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        model.load_backbones(backbones)?;
        Ok(model)
    }

    /// Model described by a checkpoint, with its stored weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::init(&ck.config)?;
        if ck.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, the configured model {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let src = ck.params.by_name(model.store.name(id))?;
            let dst = model.store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::dim("checkpoint parameter", src.shape(), dst.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }

    /// Copies `image.*` and, when the variant uses it, `brain_encoder.*`.
    pub fn load_backbones(&mut self, backbones: &ParamStore) -> Result<()> {
        copy_prefix(backbones, &mut self.store, image_encoder::PREFIX)?;
        if self.brain.is_some() {
            copy_prefix(backbones, &mut self.store, brain_encoder::PREFIX)?;
        }
        Ok(())
    }

    fn apply_frozen_flags(&mut self, cfg: &RunConfig) {
        self.store.set_frozen(&format!("{}.", image_encoder::PREFIX), cfg.image.frozen);
        self.store
            .set_frozen(&format!("{}.", brain_encoder::PREFIX), cfg.brain_encoder.frozen);
        self.store
            .set_frozen(&format!("{}.input_whitening.", brain_encoder::PREFIX), true);
    }

    /// True when image and brain encoders are both frozen, so their outputs
    /// can be computed once per dataset.
    pub fn backbones_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|(_, n, _)| {
                n.starts_with(image_encoder::PREFIX) || n.starts_with(brain_encoder::PREFIX)
            })
            .all(|(_, _, t)| !t.requires_grad())
    }

    /// Scalars per parameter group prefix, in store order.
    pub fn group_sizes(&self) -> Vec<(&'static str, usize)> {
        [
            image_encoder::PREFIX,
            brain_encoder::PREFIX,
            brain_transformer::PREFIX,
            fusion::PREFIX,
        ]
        .into_iter()
        .map(|p| {
            let dotted = format!("{p}.");
            let n = self
                .store
                .iter()
                .filter(|(_, n, _)| n.starts_with(&dotted))
                .map(|(_, _, t)| t.len())
                .sum();
            (p, n)
        })
        .collect()
    }

    /// Fusion stage from image tokens `I_c [B, d_v]`, `I_p [B, N_p, d_v]` and
    /// predicted voxels `[B, V]`.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        i_c: Var,
        i_p: Var,
        fmri: Option<Var>,
    ) -> Result<FusionVars> {
        let brain = match (&self.brain, fmri) {
            (Some(b), Some(y)) => {
                let y = match &b.ranges {
                    Some(r) => tape.select_columns(y, r)?,
                    None => y,
                };
                Some(b.transformer.forward(tape, store, y)?)
            }
            (Some(_), None) => return Err(Error::Input("model expects predicted fMRI".into())),
            (None, _) => None,
        };
        self.fusion.forward(tape, store, i_c, i_p, brain)
    }

    /// Whole pipeline from images `[B, C, H, W]`. `store` is normally
    /// `self.store` or a perturbed copy of it.
    pub fn forward_images(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<FusionVars> {
        let (i_c, i_p) = self.image.forward(tape, store, images)?;
        let fmri = match &self.brain {
            Some(b) => Some(b.encoder.forward(tape, store, i_p)?),
            None => None,
        };
        self.forward_features(tape, store, i_c, i_p, fmri)
    }

    /// Backbone outputs for every image, in dataset order.
    pub fn extract(&self, data: &LabeledImages) -> Result<Features> {
        if data.is_empty() {
            return Err(Error::Input("empty split".into()));
        }
        let order: Vec<usize> = (0..data.len()).collect();
        let (mut cls, mut patches, mut fmri) = (Vec::new(), Vec::new(), Vec::new());
        let mut patch_shape = Vec::new();
        for chunk in order.chunks(CHUNK) {
            let mut tape = Tape::new();
            let (c, p) = self.image.forward(&mut tape, &self.store, &data.batch(chunk)?)?;
            if let Some(b) = &self.brain {
                let y = b.encoder.forward(&mut tape, &self.store, p)?;
                fmri.extend_from_slice(tape.value(y).data());
            }
            cls.extend_from_slice(tape.value(c).data());
            patches.extend_from_slice(tape.value(p).data());
            patch_shape = tape.shape(p)[1..].to_vec();
        }
        let n = data.len();
        let d_v = self.image.cfg.d_v;
        let mut p_shape = vec![n];
        p_shape.extend(patch_shape);
        Ok(Features {
            cls: Tensor::new(vec![n, d_v], cls)?,
            patches: Tensor::new(p_shape, patches)?,
            fmri: match &self.brain {
                Some(b) => Some(Tensor::new(vec![n, b.encoder.cfg.voxels], fmri)?),
                None => None,
            },
            labels: data.labels.clone(),
        })
    }
}

/// Frozen backbone outputs of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// `[N, d_v]`
    pub cls: Tensor,
    /// `[N, N_p, d_v]`
    pub patches: Tensor,
    /// `[N, V]` predicted voxels, absent without the brain branch.
    pub fmri: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Puts the selected rows on the tape as constants.
    pub fn batch(&self, tape: &mut Tape, indices: &[usize]) -> Result<(Var, Var, Option<Var>)> {
        let c = tape.constant(gather_rows(&self.cls, indices)?);
        let p = tape.constant(gather_rows(&self.patches, indices)?);
        let y = match &self.fmri {
            Some(f) => Some(tape.constant(gather_rows(f, indices)?)),
            None => None,
        };
        Ok((c, p, y))
    }
}

/// Rows of the leading axis of `t`.
pub fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = *t.shape().first().ok_or_else(|| Error::Input("scalar has no rows".into()))?;
    let width = if n == 0 { 0 } else { t.len() / n };
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        if i >= n {
            return Err(Error::Input(format!("row {i} out of {n}")));
        }
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// Outcome of warming up the brain encoder on teacher responses.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainBackboneReport {
    pub pretrain: BrainPretrainReport,
    /// Mean voxel correlation on held-out images, when given.
    pub val_mean_r: Option<f64>,
}

/// Supervised warm-up of the image encoder. Returns a store holding only
/// `image.*` parameters.
pub fn pretrain_image(cfg: &RunConfig, train: &LabeledImages) -> Result<(ParamStore, ImagePretrainReport)> {
    cfg.image.validate()?;
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, &cfg.image, SeedStream(cfg.image_pretrain.seed).split_str("init"))?;
    let report = pretrain_image_encoder(&mut store, &enc, train, &cfg.image_pretrain)?;
    log::info!(
        "image encoder warm-up: final loss {:.4}, train accuracy {:.3}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy
    );
    Ok((store, report))
}

fn encode_all(enc: &ImageEncoder, store: &ParamStore, data: &LabeledImages) -> Result<Vec<ImageTokens>> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in order.chunks(CHUNK) {
        out.extend(enc.encode(store, &data.batch(chunk)?)?);
    }
    Ok(out)
}

/// Synthetic responses for every image of `data`, keyed by position.
pub fn teacher_responses(teacher: &SyntheticTeacher, tokens: &[ImageTokens], offset: u64) -> Result<Vec<FmriRecord>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| teacher.respond(t, offset + i as u64))
        .collect()
}

/// Fits the brain encoder to synthetic teacher responses of the images in
/// `train`, encoded by the warmed-up image encoder in `image_store`. Returns
/// a store holding only `brain_encoder.*` parameters and the training
/// responses.
pub fn pretrain_brain(
    cfg: &RunConfig,
    image_store: &ParamStore,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
) -> Result<(ParamStore, BrainBackboneReport, Vec<FmriRecord>)> {
    let mut scratch = ParamStore::new();
    let enc = ImageEncoder::new(&mut scratch, &cfg.image, SeedStream(0))?;
    copy_prefix(image_store, &mut scratch, image_encoder::PREFIX)?;
    let tokens = encode_all(&enc, &scratch, train)?;

    let map = cfg.brain_encoder.default_map()?;
    let mut teacher = SyntheticTeacher::new(cfg.image.d_v, map.clone(), cfg.teacher.sigma, cfg.teacher.seed)?;
    teacher.fit_normalization(&tokens)?;
    let responses = teacher_responses(&teacher, &tokens, 0)?;
    let pairs: Vec<(ImageTokens, FmriRecord)> = tokens.into_iter().zip(responses.iter().cloned()).collect();

    let mut store = ParamStore::new();
    let brain = BrainEncoder::new(
        &mut store,
        &cfg.brain_encoder,
        map,
        SeedStream(cfg.brain_pretrain.seed).split_str("init"),
    )?;
    let pretrain = pretrain_brain_encoder(&mut store, &brain, &pairs, &cfg.brain_pretrain)?;
    let val_mean_r = match val {
        Some(v) => {
            let toks = encode_all(&enc, &scratch, v)?;
            let resp = teacher_responses(&teacher, &toks, train.len() as u64)?;
            let pairs: Vec<_> = toks.into_iter().zip(resp).collect();
            Some(evaluate_brain_encoder(&store, &brain, &pairs)?.2)
        }
        None => None,
    };
    log::info!(
        "brain encoder warm-up: train mse {:.4}, train R {:.3}, val R {:?}",
        pretrain.final_mse,
        pretrain.mean_r,
        val_mean_r
    );
    Ok((store, BrainBackboneReport { pretrain, val_mean_r }, responses))
}

/// Both warm-ups in sequence; the returned store holds `image.*` and
/// `brain_encoder.*`.
pub fn pretrain_backbones(
    cfg: &RunConfig,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
) -> Result<(ParamStore, ImagePretrainReport, BrainBackboneReport)> {
    let (mut store, image_report) = pretrain_image(cfg, train)?;
    let (brain, brain_report, _) = pretrain_brain(cfg, &store, train, val)?;
    store.absorb(brain)?;
    Ok((store, image_report, brain_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Variant;

    #[test]
    fn variants_build_expected_groups() {
        let base = RunConfig::default();
        for v in Variant::ALL {
            let m = BmflModel::init(&base.with_variant(v)).unwrap();
            let sizes: std::collections::HashMap<_, _> = m.group_sizes().into_iter().collect();
            let cross = m.store.iter().filter(|(_, n, _)| n.starts_with("fusion.vb.") || n.starts_with("fusion.bv.")).count();
            match v {
                Variant::NoFmri => {
                    assert_eq!(sizes["brain_transformer"], 0);
                    assert_eq!(sizes["brain_encoder"], 0);
                    assert_eq!(cross, 0);
                }
                Variant::NoCrossAttention => assert_eq!(cross, 0),
                _ => assert!(cross > 0),
            }
            assert!(m.backbones_frozen());
            let trainable: Vec<_> = m.store.trainable().into_iter().map(|id| m.store.name(id).to_string()).collect();
            assert!(trainable.iter().all(|n| n.starts_with("brain_transformer.") || n.starts_with("fusion.")));
        }
        let lvc = BmflModel::init(&base.with_variant(Variant::Lvc)).unwrap();
        let b = lvc.brain.unwrap();
        let selected: usize = b.ranges.unwrap().iter().map(|r| r.len()).sum();
        assert_eq!(selected, b.transformer.voxels);
        assert!(selected < 3072);
    }

    #[test]
    fn gather_rows_picks_leading_axis() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = gather_rows(&t, &[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(gather_rows(&t, &[3]).is_err());
    }
}
