//! Finite-difference check of the whole model at tiny dimensions.

use super::config::RunConfig;
use super::model::BmflModel;
use crate::brain_encoder::BrainEncoderConfig;
use crate::brain_transformer::BrainTransformerConfig;
use crate::data::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::image_encoder::ImageEncoderConfig;
use crate::numerics::rng::normal;
use crate::numerics::{grad_check, GradCheckReport, SeedStream, Tensor};
use crate::objective::total_loss_var;

pub const GRADCHECK_EPS: f32 = 1e-3;
/// Std of the jitter added to every parameter before checking.
pub const PROBE_JITTER: f32 = 0.2;

/// Model widths of at most 8, three classes.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        data: SyntheticDatasetSpec {
            num_classes: 3,
            height: 8,
            width: 8,
            ..Default::default()
        },
        image: ImageEncoderConfig {
            height: 8,
            width: 8,
            patch_size: 4,
            d_v: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        },
        brain_encoder: BrainEncoderConfig {
            d_model: 8,
            d_in: 8,
            heads: 2,
            depth: 1,
            voxels: 64,
            ..Default::default()
        },
        brain_transformer: BrainTransformerConfig {
            kernel: 16,
            d_b: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        },
        fusion: FusionConfig {
            d_f: 8,
            heads: 2,
            num_classes: 3,
            ..Default::default()
        },
        batch_size: 2,
        ..RunConfig::default()
    };
    cfg.loss.alpha = -0.4;
    cfg
}

/// Central-difference check of every parameter of the model described by
/// `cfg` on a random batch of two images. One row per parameter tensor;
/// frozen tensors are reported with their analytic gradient only.
///
/// The probe point is the initialization plus Gaussian jitter: at the
/// initial 0.02 scale the fused features are nearly constant, the
/// correlation term is sharply curved there, and central differences stop
/// resolving it.
pub fn gradcheck_all(cfg: &RunConfig) -> Result<GradCheckReport> {
    let widths = [
        cfg.image.d_v,
        cfg.brain_encoder.d_model,
        cfg.brain_transformer.d_b,
        cfg.fusion.d_f,
    ];
    if widths.iter().any(|&d| d > 8) || cfg.batch_size > 2 {
        return Err(Error::Config(format!(
            "gradcheck needs widths <= 8 and batch <= 2, got {widths:?} and {}",
            cfg.batch_size
        )));
    }
    let model = BmflModel::init(cfg)?;
    let b = cfg.batch_size;
    let mut rng = SeedStream(cfg.seed).split_str("gradcheck").rng();
    let mut store = model.store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += PROBE_JITTER * normal(&mut rng);
        }
    }
    let n = b * cfg.image.channels * cfg.image.height * cfg.image.width;
    let images = Tensor::new(
        vec![b, cfg.image.channels, cfg.image.height, cfg.image.width],
        (0..n).map(|_| 0.5 + 0.25 * normal(&mut rng)).collect(),
    )?;
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.fusion.num_classes).collect();
    let loss_cfg = cfg.effective_loss();
    let ids: Vec<_> = model.store.ids().collect();
    grad_check(&mut store, &ids, GRADCHECK_EPS, |tape, s| {
        let vars = model.forward_images(tape, s, &images)?;
        let fused = vars.x_vb.zip(vars.x_bv);
        Ok(total_loss_var(tape, vars.logits, &labels, fused, &loss_cfg)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let report = gradcheck_all(&cfg).unwrap();
        let model = BmflModel::init(&cfg).unwrap();
        assert_eq!(report.params.len(), model.store.len());
        for p in &report.params {
            if p.frozen {
                assert_eq!(p.max_abs_analytic, 0.0, "{}", p.name);
            } else {
                assert!(p.max_rel_error <= 1e-3, "{} {}", p.name, p.max_rel_error);
            }
        }
        assert!(report.params.iter().any(|p| p.frozen));
        assert!(report.params.iter().any(|p| !p.frozen && p.max_abs_analytic > 0.0));
    }

    #[test]
    fn wide_config_is_refused() {
        assert!(matches!(gradcheck_all(&RunConfig::default()), Err(Error::Config(_))));
    }
}
