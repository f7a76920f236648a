//! Transformer building blocks on top of the tape.

use super::params::{ParamId, ParamStore};
use super::rng::SeedStream;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: SeedStream) -> Result<Self> {
        Ok(Self {
            weight: store.init_normal(&format!("{name}.weight"), &[in_dim, out_dim], seed)?,
            bias: store.init_const(&format!("{name}.bias"), &[out_dim], 0.0)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init_const(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.init_const(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention built from the single-head primitive by splitting
/// projected queries/keys/values into heads and concatenating the results.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, seed: SeedStream) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, seed)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, seed)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, seed)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, seed)?,
            heads,
        })
    }

    /// `query: [B, Tq, d]`, `context: [B, Tk, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let (q, k, v) = (
            tape.split_heads(q, self.heads)?,
            tape.split_heads(k, self.heads)?,
            tape.split_heads(v, self.heads)?,
        );
        let o = tape.attention(q, k, v)?;
        let o = tape.merge_heads(o, self.heads)?;
        self.out.forward(tape, store, o)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, seed: SeedStream) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm transformer encoder block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        seed: SeedStream,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, seed)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

/// Pre-norm decoder block: query self-attention, cross-attention into a
/// memory sequence, then an MLP, each with a residual connection.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        seed: SeedStream,
    ) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, seed)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, seed)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, memory: Var) -> Result<Var> {
        let h = self.ln_self.forward(tape, store, queries)?;
        let a = self.self_attn.forward(tape, store, h, h)?;
        let x = tape.add(queries, a)?;
        let h = self.ln_cross.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, memory)?;
        let x = tape.add(x, c)?;
        let h = self.ln_mlp.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}
