//! A small vision transformer producing a CLS vector and patch tokens.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::fit::{copy_prefix, train_loop, PretrainOptions};
use crate::numerics::nn::{EncoderBlock, LayerNorm, Linear};
use crate::numerics::{ParamId, ParamStore, SeedStream, Tape, Tensor, Var};
use crate::objective::cross_entropy_var;

pub const PREFIX: &str = "image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frozen: bool,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch_size: 8,
            d_v: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            frozen: true,
        }
    }
}

impl ImageEncoderConfig {
    /// ViT-B/14-sized preset. Accepted everywhere but far too slow to train here.
    pub fn full_scale() -> Self {
        Self {
            height: 224,
            width: 224,
            patch_size: 14,
            d_v: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_v {} not divisible by {} heads", self.d_v, self.heads)));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub cls: Vec<f32>,
    /// `[N_p, d_v]`
    pub patches: Tensor,
}

/// Cuts `[B, C, H, W]` images into `[B, N_p, p·p·C]` patch vectors, patches
/// in row-major grid order, each vector laid out as `(dy, dx, c)`.
pub fn patchify_images(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = match *images.shape() {
        [b, c, h, w] => (b, c, h, w),
        [c, h, w] => (1, c, h, w),
        _ => return Err(Error::dim("patchify_images", images.shape(), &[])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Input(format!("{h}x{w} image does not tile into {patch}px patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = images.data();
    let mut out = vec![0.0f32; b * gh * gw * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((bi * gh + gy) * gw + gx) * pd;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            let y = gy * patch + dy;
                            let x = gx * patch + dx;
                            out[base + (dy * patch + dx) * c + ch] = src[((bi * c + ch) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ImageEncoderConfig, seed: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let seed = seed.split_str(PREFIX);
        let d = cfg.d_v;
        let patch_embed = Linear::new(store, &format!("{PREFIX}.patch_embed"), cfg.patch_dim(), d, seed)?;
        let cls = store.init_normal(&format!("{PREFIX}.cls"), &[d], seed)?;
        let pos = store.init_normal(&format!("{PREFIX}.pos"), &[cfg.num_patches() + 1, d], seed)?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("{PREFIX}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio, seed))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{PREFIX}.norm"), d)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let c = &self.cfg;
        let expect = [c.channels, c.height, c.width];
        let s = images.shape();
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::dim("encode_image", s, &expect));
        }
        if !images.all_finite() {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    /// `images: [B, C, H, W]` to `(cls [B, d_v], patches [B, N_p, d_v])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<(Var, Var)> {
        self.check_images(images)?;
        let patches = tape.constant(patchify_images(images, self.cfg.patch_size)?);
        let x = self.patch_embed.forward(tape, store, patches)?;
        let cls = tape.param(store, self.cls);
        let x = tape.prepend_token(x, cls)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        let cls = tape.select_token(x, 0)?;
        let patches = tape.slice_tokens(x, 1, self.cfg.num_patches())?;
        Ok((cls, patches))
    }

    /// Gradient-free batch encoding.
    pub fn encode(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<ImageTokens>> {
        let mut tape = Tape::new();
        let (cls, patches) = self.forward(&mut tape, store, images)?;
        let (n, d) = (self.cfg.num_patches(), self.cfg.d_v);
        let cls = tape.value(cls).data();
        let patches = tape.value(patches).data();
        (0..images.shape()[0])
            .map(|i| {
                Ok(ImageTokens {
                    cls: cls[i * d..(i + 1) * d].to_vec(),
                    patches: Tensor::new(vec![n, d], patches[i * n * d..(i + 1) * n * d].to_vec())?,
                })
            })
            .collect()
    }

    /// Encodes one `[C, H, W]` image.
    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<ImageTokens> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.reshaped(&shape)?;
        Ok(self.encode(store, &batch)?.remove(0))
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, n, _)| n.starts_with(&format!("{PREFIX}.")))
            .map(|(id, _, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImagePretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Supervised warm-up: a temporary linear head on the CLS token is trained
/// jointly with the encoder and thrown away afterwards. The encoder's frozen
/// flag is applied to the store on return.
pub fn pretrain_image_encoder(
    store: &mut ParamStore,
    encoder: &ImageEncoder,
    data: &LabeledImages,
    opts: &PretrainOptions,
) -> Result<ImagePretrainReport> {
    if data.is_empty() {
        return Err(Error::Input("empty image dataset".into()));
    }
    let mut scratch = ParamStore::new();
    let enc = ImageEncoder::new(&mut scratch, &encoder.cfg, SeedStream(0))?;
    copy_prefix(store, &mut scratch, PREFIX)?;
    let head = Linear::new(
        &mut scratch,
        "pretrain_head",
        encoder.cfg.d_v,
        data.num_classes,
        SeedStream(opts.seed).split_str("pretrain_head"),
    )?;

    let epoch_losses = train_loop(&mut scratch, data.len(), opts, |tape, s, batch| {
        let images = data.batch(batch)?;
        let (cls, _) = enc.forward(tape, s, &images)?;
        let logits = head.forward(tape, s, cls)?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        cross_entropy_var(tape, logits, &labels)
    })?;

    let mut hits = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(128) {
        let mut tape = Tape::new();
        let (cls, _) = enc.forward(&mut tape, &scratch, &data.batch(chunk)?)?;
        let logits = head.forward(&mut tape, &scratch, cls)?;
        let l = tape.value(logits);
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(l.row(r)) == data.labels[i] {
                hits += 1;
            }
        }
    }

    copy_prefix(&scratch, store, PREFIX)?;
    store.set_frozen(&format!("{PREFIX}."), encoder.cfg.frozen);
    Ok(ImagePretrainReport {
        epoch_losses,
        train_accuracy: hits as f64 / data.len() as f64,
    })
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
