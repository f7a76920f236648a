use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{normal, SeedStream};
use crate::numerics::Tensor;
use rand::Rng;

/// Images `[C, H, W]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stacks the selected images into one `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self
            .image_shape()
            .ok_or_else(|| Error::Input("empty image set".into()))?
            .to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.images[0].len());
        for &i in indices {
            if self.images[i].shape() != shape {
                return Err(Error::dim("image batch", &shape, self.images[i].shape()));
            }
            data.extend_from_slice(self.images[i].data());
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }
}

/// Parameters of the procedural shapes dataset. Each class has its own shape
/// family, stripe frequency band and base hue; samples vary in position,
/// size, hue, saturation, stripe orientation and background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub val_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Half-width of the uniform hue jitter, degrees.
    pub hue_jitter: f32,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f32,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 200,
            val_per_class: 50,
            height: 32,
            width: 32,
            seed: 0,
            hue_jitter: 25.0,
            pixel_noise: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeFamily {
    Disc,
    Square,
    Triangle,
    Ring,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SyntheticDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Input("dataset needs at least one class and one sample per class".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Input("images must be at least 8x8".into()));
        }
        Ok(())
    }

    fn family(&self, class: usize) -> ShapeFamily {
        match class % 4 {
            0 => ShapeFamily::Disc,
            1 => ShapeFamily::Square,
            2 => ShapeFamily::Triangle,
            _ => ShapeFamily::Ring,
        }
    }

    /// Stripe cycles across the object: low band for the first half of the
    /// classes, high band for the rest.
    fn stripe_band(&self, class: usize) -> (f32, f32) {
        if (class / 4).is_multiple_of(2) {
            (1.0, 2.0)
        } else {
            (3.5, 5.0)
        }
    }

    fn base_hue(&self, class: usize) -> f32 {
        class as f32 * 360.0 / self.num_classes as f32
    }

    /// Renders sample `index` of `class`; fully determined by the stream.
    fn render(&self, class: usize, seed: SeedStream) -> Tensor {
        let mut rng = seed.rng();
        let (h, w) = (self.height, self.width);
        let scale = h.min(w) as f32 / 32.0;
        let radius = rng.random_range(7.0..11.0) * scale;
        let cy = h as f32 / 2.0 + rng.random_range(-5.0..5.0) * scale;
        let cx = w as f32 / 2.0 + rng.random_range(-5.0..5.0) * scale;
        let hue = self.base_hue(class) + rng.random_range(-self.hue_jitter..=self.hue_jitter);
        let color = hsv_to_rgb(hue, rng.random_range(0.55..0.95), rng.random_range(0.65..1.0));
        let (lo, hi) = self.stripe_band(class);
        let cycles = rng.random_range(lo..hi);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (ca, sa) = (angle.cos(), angle.sin());
        let bg_level = rng.random_range(0.1..0.45);
        let bg_tint = hsv_to_rgb(rng.random_range(0.0..360.0), 0.15, 1.0);
        let family = self.family(class);

        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 + 0.5 - cy) / radius;
                let dx = (x as f32 + 0.5 - cx) / radius;
                let inside = match family {
                    ShapeFamily::Disc => dx * dx + dy * dy <= 1.0,
                    ShapeFamily::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
                    ShapeFamily::Triangle => dy <= 0.8 && dy >= -1.0 + 2.0 * dx.abs() - 0.2,
                    ShapeFamily::Ring => {
                        let r2 = dx * dx + dy * dy;
                        (0.3..=1.0).contains(&r2)
                    }
                };
                let noise = normal(&mut rng) * self.pixel_noise;
                for c in 0..3 {
                    let v = if inside {
                        let t = (dx * ca + dy * sa) * cycles * std::f32::consts::PI + phase;
                        color[c] * (0.55 + 0.45 * t.sin())
                    } else {
                        bg_level * bg_tint[c]
                    };
                    data[c * h * w + y * w + x] = (v + noise).clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("shape matches")
    }

    fn split(&self, per_class: usize, stream: u64) -> LabeledImages {
        let root = SeedStream(self.seed).split(stream);
        let mut images = Vec::with_capacity(per_class * self.num_classes);
        let mut labels = Vec::with_capacity(images.capacity());
        for i in 0..per_class {
            for class in 0..self.num_classes {
                images.push(self.render(class, root.split((class * per_class + i) as u64)));
                labels.push(class);
            }
        }
        LabeledImages {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Builds the train and validation splits. The two splits draw from the
/// same generator through disjoint seed streams.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<(LabeledImages, LabeledImages)> {
    spec.validate()?;
    Ok((spec.split(spec.samples_per_class, 1), spec.split(spec.val_per_class, 2)))
}
