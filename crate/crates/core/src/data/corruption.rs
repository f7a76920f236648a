//! Out-of-distribution image corruptions. Both are pure functions of
//! `(image, spec)`; dataset-level application derives one seed per item so
//! output does not depend on processing order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledImages;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, normal, SeedStream};
use crate::numerics::Tensor;

const GAMMA: f32 = 2.2;
/// Shot and read noise coefficients at severity 1, in linear light.
const SHOT_NOISE: f32 = 0.012;
const READ_NOISE: f32 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    LowLight,
    Masked,
}

impl CorruptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::LowLight => "low_light",
            CorruptionKind::Masked => "masked",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_light" | "low-light" => Ok(Self::LowLight),
            "masked" => Ok(Self::Masked),
            _ => Err(Error::Config(format!("unknown corruption {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    Saliency,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "saliency" => Ok(Self::Saliency),
            _ => Err(Error::Config(format!("unknown mask mode {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Low light: exposure is scaled by `1 - severity`. In `(0, 1]`.
    pub severity: f32,
    /// Masked: fraction of grid cells to zero. In `[0, 1)`.
    pub mask_ratio: f32,
    pub mask_mode: MaskMode,
    /// Masking grid cell edge in pixels; matches the encoder patch size.
    pub cell_size: usize,
    /// Low light: add signal-dependent sensor noise.
    pub noise: bool,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn low_light(severity: f32, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::LowLight,
            severity,
            mask_ratio: 0.0,
            mask_mode: MaskMode::Random,
            cell_size: 8,
            noise: true,
            seed,
        }
    }

    pub fn masked(mask_ratio: f32, mode: MaskMode, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::Masked,
            severity: 1.0,
            mask_ratio,
            mask_mode: mode,
            cell_size: 8,
            noise: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(Error::Range {
                what: "severity",
                value: self.severity as f64,
                range: "(0, 1]".into(),
            });
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Range {
                what: "mask_ratio",
                value: self.mask_ratio as f64,
                range: "[0, 1)".into(),
            });
        }
        if self.cell_size == 0 {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim("corruption", image.shape(), &[])),
    }
}

/// Simplified unprocess / darken / reprocess pipeline: inverse gamma to
/// linear light, exposure scaled by `1 - severity`, Gaussian noise with
/// variance `shot·x + read²`, gamma back, clip to `[0, 1]`.
pub fn corrupt_low_light(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    image_dims(image)?;
    let mut rng = SeedStream(spec.seed).rng();
    let exposure = 1.0 - spec.severity;
    let shot = SHOT_NOISE * spec.severity;
    let read = READ_NOISE * spec.severity;
    let mut out = image.clone();
    for v in out.data_mut() {
        let linear = v.clamp(0.0, 1.0).powf(GAMMA) * exposure;
        let noisy = if spec.noise {
            let sigma = (shot * linear + read * read).sqrt();
            linear + sigma * normal(&mut rng)
        } else {
            linear
        };
        *v = noisy.clamp(0.0, 1.0).powf(1.0 / GAMMA);
    }
    Ok(out)
}

/// Sum of squared forward differences inside each grid cell, all channels.
pub fn cell_gradient_energy(image: &Tensor, cell: usize) -> Result<Vec<f64>> {
    let (c, h, w) = image_dims(image)?;
    if h % cell != 0 || w % cell != 0 {
        return Err(Error::Input(format!("{h}x{w} image does not tile into {cell}px cells")));
    }
    let (gh, gw) = (h / cell, w / cell);
    let d = image.data();
    let mut energy = vec![0.0f64; gh * gw];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x] as f64;
                let mut e = 0.0;
                if x + 1 < w {
                    e += (plane[y * w + x + 1] as f64 - v).powi(2);
                }
                if y + 1 < h {
                    e += (plane[(y + 1) * w + x] as f64 - v).powi(2);
                }
                energy[(y / cell) * gw + x / cell] += e;
            }
        }
    }
    Ok(energy)
}

/// Zeroes `floor(mask_ratio · cells)` grid cells, chosen uniformly at random
/// or by descending gradient energy.
pub fn corrupt_masked(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = image_dims(image)?;
    let cell = spec.cell_size;
    if h % cell != 0 || w % cell != 0 {
        return Err(Error::Input(format!("{h}x{w} image does not tile into {cell}px cells")));
    }
    let (gh, gw) = (h / cell, w / cell);
    let n_cells = gh * gw;
    let k = (spec.mask_ratio as f64 * n_cells as f64).floor() as usize;
    let chosen: Vec<usize> = match spec.mask_mode {
        MaskMode::Random => {
            let mut rng = SeedStream(spec.seed).rng();
            let mut idx: Vec<usize> = (0..n_cells).collect();
            for i in 0..k {
                let j = rng.random_range(i..n_cells);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
        MaskMode::Saliency => {
            let energy = cell_gradient_energy(image, cell)?;
            let mut idx: Vec<usize> = (0..n_cells).collect();
            idx.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        }
    };
    let mut out = image.clone();
    let d = out.data_mut();
    for cell_idx in chosen {
        let (gy, gx) = (cell_idx / gw, cell_idx % gw);
        for ch in 0..c {
            for y in gy * cell..(gy + 1) * cell {
                let row = ch * h * w + y * w;
                d[row + gx * cell..row + (gx + 1) * cell].fill(0.0);
            }
        }
    }
    Ok(out)
}

pub fn corrupt(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    match spec.kind {
        CorruptionKind::LowLight => corrupt_low_light(image, spec),
        CorruptionKind::Masked => corrupt_masked(image, spec),
    }
}

/// One line of a corruption manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub kind: String,
    pub severity: f32,
    pub seed: u64,
}

/// Corrupts every image with a per-item seed derived from `spec.seed`;
/// labels are copied through.
pub fn corrupt_dataset(ds: &LabeledImages, spec: &CorruptionSpec) -> Result<(LabeledImages, Vec<ManifestRow>)> {
    spec.validate()?;
    let mut images = Vec::with_capacity(ds.len());
    let mut manifest = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let item = CorruptionSpec {
            seed: derive_seed(spec.seed, i as u64),
            ..*spec
        };
        images.push(corrupt(img, &item)?);
        manifest.push(ManifestRow {
            index: i,
            kind: spec.kind.as_str().to_string(),
            severity: match spec.kind {
                CorruptionKind::LowLight => spec.severity,
                CorruptionKind::Masked => spec.mask_ratio,
            },
            seed: item.seed,
        });
    }
    Ok((
        LabeledImages {
            images,
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
        },
        manifest,
    ))
}

pub fn write_manifest<W: std::io::Write>(rows: &[ManifestRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
