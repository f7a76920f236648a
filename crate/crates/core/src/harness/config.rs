use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::brain_encoder::{BrainEncoderConfig, RoiSubset};
use crate::brain_transformer::BrainTransformerConfig;
use crate::data::{MaskMode, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::fit::PretrainOptions;
use crate::fusion::FusionConfig;
use crate::image_encoder::ImageEncoderConfig;
use crate::numerics::AdamWConfig;
use crate::objective::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_epochs: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            floor_lr: 0.0,
            warmup_epochs: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub sigma: f32,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { sigma: 0.1, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_fmri: bool,
    pub no_cross_attention: bool,
    pub no_fusion_loss: bool,
    pub roi: RoiSubset,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            no_fmri: false,
            no_cross_attention: false,
            no_fusion_loss: false,
            roi: RoiSubset::All,
        }
    }
}

/// Model variants compared by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFmri,
    NoCrossAttention,
    NoFusionLoss,
    Lvc,
    Hvc,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFmri,
        Variant::NoCrossAttention,
        Variant::NoFusionLoss,
        Variant::Lvc,
        Variant::Hvc,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFmri => "w/o fMRI",
            Variant::NoCrossAttention => "w/o cross-attention",
            Variant::NoFusionLoss => "w/o L_fusion",
            Variant::Lvc => "LVC only",
            Variant::Hvc => "HVC only",
        }
    }

    pub fn flags(&self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoFmri => f.no_fmri = true,
            Variant::NoCrossAttention => f.no_cross_attention = true,
            Variant::NoFusionLoss => f.no_fusion_loss = true,
            Variant::Lvc => f.roi = RoiSubset::Lvc,
            Variant::Hvc => f.roi = RoiSubset::Hvc,
        }
        f
    }
}

impl AblationFlags {
    /// The single variant these flags describe.
    pub fn variant(&self) -> Result<Variant> {
        let roi = match self.roi {
            RoiSubset::All => None,
            RoiSubset::Lvc => Some(Variant::Lvc),
            RoiSubset::Hvc => Some(Variant::Hvc),
            RoiSubset::Other => {
                return Err(Error::Config("roi must be one of lvc, hvc, all".into()));
            }
        };
        let set: Vec<Variant> = [
            self.no_fmri.then_some(Variant::NoFmri),
            self.no_cross_attention.then_some(Variant::NoCrossAttention),
            self.no_fusion_loss.then_some(Variant::NoFusionLoss),
            roi,
        ]
        .into_iter()
        .flatten()
        .collect();
        match set.as_slice() {
            [] => Ok(Variant::Full),
            [v] => Ok(*v),
            _ => Err(Error::Config(format!("ablation flags combine several variants: {set:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub low_light_severity: f32,
    pub mask_ratio: f32,
    pub mask_mode: MaskMode,
    pub corruption_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            low_light_severity: 0.7,
            mask_ratio: 0.25,
            mask_mode: MaskMode::Random,
            corruption_seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub image_checkpoint: Option<PathBuf>,
    pub brain_checkpoint: Option<PathBuf>,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticDatasetSpec,
    pub image: ImageEncoderConfig,
    pub brain_encoder: BrainEncoderConfig,
    pub brain_transformer: BrainTransformerConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub image_pretrain: PretrainOptions,
    pub brain_pretrain: PretrainOptions,
    pub teacher: TeacherConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut brain_pretrain = PretrainOptions {
            epochs: 30,
            peak_lr: 5e-3,
            ..PretrainOptions::default()
        };
        brain_pretrain.optimizer.weight_decay = 0.0;
        let image_pretrain = PretrainOptions {
            epochs: 30,
            ..PretrainOptions::default()
        };
        Self {
            data: SyntheticDatasetSpec::default(),
            image: ImageEncoderConfig::default(),
            brain_encoder: BrainEncoderConfig::default(),
            brain_transformer: BrainTransformerConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            image_pretrain,
            brain_pretrain,
            teacher: TeacherConfig::default(),
            batch_size: 64,
            epochs: 20,
            seed: 0,
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.brain_transformer.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        self.ablation.variant()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.brain_encoder.d_in != self.image.d_v {
            return Err(Error::Config(format!(
                "brain encoder reads {}-wide tokens but the image encoder emits {}",
                self.brain_encoder.d_in, self.image.d_v
            )));
        }
        if self.fusion.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "classifier has {} classes, dataset has {}",
                self.fusion.num_classes, self.data.num_classes
            )));
        }
        if !(self.schedule.peak_lr >= 0.0 && self.schedule.floor_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        self.ablation.variant()
    }

    /// Copy of this config with the ablation flags of `variant`.
    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        RunConfig {
            ablation: variant.flags(),
            ..self.clone()
        }
    }

    /// Fusion settings with the ablation flags folded in.
    pub fn effective_fusion(&self) -> FusionConfig {
        FusionConfig {
            use_fmri: !self.ablation.no_fmri,
            use_cross_attention: !self.ablation.no_cross_attention,
            num_classes: self.data.num_classes,
            ..self.fusion.clone()
        }
    }

    /// Loss settings with the ablation flags folded in. Without
    /// cross-attention there is no fused pair, so the correlation term is off.
    pub fn effective_loss(&self) -> LossConfig {
        let fusion = self.effective_fusion();
        LossConfig {
            enabled_fusion_loss: self.loss.enabled_fusion_loss
                && !self.ablation.no_fusion_loss
                && fusion.cross_attention_active(),
            ..self.loss
        }
    }

    /// Sets one dotted key (`fusion.d_f`, `loss.alpha`, `ablation.roi`, ...)
    /// from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        }
        *node = parse_like(node, value).ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))?;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&text)?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering of every leaf, readable by [`apply_kv`](Self::apply_kv).
    pub fn to_kv(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &tree, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Null => {}
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

fn parse_like(current: &Value, text: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => match text {
            "true" | "1" | "yes" => Some(Value::Bool(true)),
            "false" | "0" | "no" => Some(Value::Bool(false)),
            _ => None,
        },
        Value::Number(n) if n.is_u64() || n.is_i64() => text
            .parse::<i64>()
            .ok()
            .map(Value::from)
            .or_else(|| text.parse::<u64>().ok().map(Value::from)),
        Value::Number(_) => text.parse::<f64>().ok().map(Value::from),
        Value::String(_) | Value::Null => Some(Value::String(text.to_string())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_full() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.variant().unwrap(), Variant::Full);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.schedule.peak_lr, 3e-3);
        assert_eq!(cfg.image_pretrain.epochs, 30);
    }

    #[test]
    fn kv_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_kv("# comment\nfusion.d_f = 32\nloss.alpha=-0.2\nablation.roi = lvc\npaths.out_dir = /tmp/x\nseed=5\n")
            .unwrap();
        assert_eq!(cfg.fusion.d_f, 32);
        assert_eq!(cfg.loss.alpha, -0.2);
        assert_eq!(cfg.ablation.roi, RoiSubset::Lvc);
        assert_eq!(cfg.paths.out_dir.as_deref(), Some(Path::new("/tmp/x")));
        assert_eq!(cfg.seed, 5);
        assert!(matches!(cfg.set("fusion.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("batch_size", "many"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("ablation.roi", "v5"), Err(Error::Config(_))));
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("paths.data_dir", "d").unwrap();
        cfg.set("loss.alpha", "-0.25").unwrap();
        let mut back = RunConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flag_combinations() {
        for v in Variant::ALL {
            assert_eq!(v.flags().variant().unwrap(), v);
        }
        let mut f = AblationFlags { no_fmri: true, no_fusion_loss: true, ..Default::default() };
        assert!(f.variant().is_err());
        f.no_fusion_loss = false;
        f.roi = RoiSubset::Hvc;
        assert!(f.variant().is_err());
        let cfg = RunConfig::default().with_variant(Variant::NoCrossAttention);
        assert!(!cfg.effective_loss().enabled_fusion_loss);
        assert_eq!(cfg.effective_loss().effective_alpha(), 0.0);
    }

    #[test]
    fn invalid_alpha_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.set("loss.alpha", "0.5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
