//! Tokenizes a voxel vector with non-overlapping windows (a stride-equals-
//! kernel 1D convolution), prepends a CLS token, adds learned positions and
//! runs a transformer encoder.

use serde::{Deserialize, Serialize};

use crate::brain_encoder::FmriRecord;
use crate::error::{Error, Result};
use crate::numerics::nn::{EncoderBlock, Linear};
use crate::numerics::{ParamId, ParamStore, SeedStream, Tape, Tensor, Var};

pub const PREFIX: &str = "brain_transformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrainTransformerConfig {
    /// Window length and stride of the patchify convolution.
    pub kernel: usize,
    pub d_b: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BrainTransformerConfig {
    fn default() -> Self {
        Self {
            kernel: 192,
            d_b: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl BrainTransformerConfig {
    pub fn full_scale() -> Self {
        Self {
            d_b: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::Config("kernel must be at least 1".into()));
        }
        if self.heads == 0 || !self.d_b.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_b {} not divisible by {} heads", self.d_b, self.heads)));
        }
        Ok(())
    }

    /// Token count for `voxels` inputs.
    pub fn num_tokens(&self, voxels: usize) -> Result<usize> {
        if voxels == 0 || !voxels.is_multiple_of(self.kernel) {
            return Err(Error::Input(format!(
                "V={voxels} is not a positive multiple of kernel={}",
                self.kernel
            )));
        }
        Ok(voxels / self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmriTokens {
    pub cls: Vec<f32>,
    /// `[N_f, d_b]`
    pub patches: Tensor,
}

#[derive(Debug, Clone)]
pub struct BrainTransformer {
    pub cfg: BrainTransformerConfig,
    pub voxels: usize,
    pub conv: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl BrainTransformer {
    pub fn new(store: &mut ParamStore, cfg: &BrainTransformerConfig, voxels: usize, seed: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_tokens(voxels)?;
        let seed = seed.split_str(PREFIX);
        let d = cfg.d_b;
        let conv = Linear::new(store, &format!("{PREFIX}.conv"), cfg.kernel, d, seed)?;
        let cls = store.init_normal(&format!("{PREFIX}.cls"), &[d], seed)?;
        let pos = store.init_normal(&format!("{PREFIX}.pos"), &[n + 1, d], seed)?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("{PREFIX}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            voxels,
            conv,
            cls,
            pos,
            blocks,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.voxels / self.cfg.kernel
    }

    /// `voxels: [B, V]` to `[B, N_f, d_b]` window embeddings.
    pub fn patchify(&self, tape: &mut Tape, store: &ParamStore, voxels: Var) -> Result<Var> {
        let b = match *tape.shape(voxels) {
            [b, v] if v == self.voxels => b,
            [_, v] => {
                self.cfg.num_tokens(v)?;
                return Err(Error::dim("patchify_fmri", tape.shape(voxels), &[self.voxels]));
            }
            _ => return Err(Error::dim("patchify_fmri", tape.shape(voxels), &[self.voxels])),
        };
        let windows = tape.reshape(voxels, &[b, self.num_tokens(), self.cfg.kernel])?;
        self.conv.forward(tape, store, windows)
    }

    /// `voxels: [B, V]` to `(F_c [B, d_b], F_p [B, N_f, d_b])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, voxels: Var) -> Result<(Var, Var)> {
        let x = self.patchify(tape, store, voxels)?;
        let cls = tape.param(store, self.cls);
        let x = tape.prepend_token(x, cls)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        let cls = tape.select_token(x, 0)?;
        let patches = tape.slice_tokens(x, 1, self.num_tokens())?;
        Ok((cls, patches))
    }

    pub fn encode_fmri(&self, store: &ParamStore, rec: &FmriRecord) -> Result<FmriTokens> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, rec.len()], rec.voxels.clone())?);
        let (cls, patches) = self.forward(&mut tape, store, v)?;
        Ok(FmriTokens {
            cls: tape.value(cls).data().to_vec(),
            patches: tape.value(patches).reshaped(&[self.num_tokens(), self.cfg.d_b])?,
        })
    }
}

/// Window embeddings of one voxel vector, `[N_f, d_b]`.
pub fn patchify_fmri(voxels: &[f32], model: &BrainTransformer, store: &ParamStore) -> Result<Tensor> {
    model.cfg.num_tokens(voxels.len())?;
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, voxels.len()], voxels.to_vec())?);
    let out = model.patchify(&mut tape, store, v)?;
    tape.value(out).reshaped(&[model.num_tokens(), model.cfg.d_b])
}
