//! Bidirectional cross-attention between the image CLS token and brain
//! patch tokens (and vice versa), followed by a linear classifier.

use serde::{Deserialize, Serialize};

use crate::brain_transformer::FmriTokens;
use crate::error::{Error, Result};
use crate::image_encoder::ImageTokens;
use crate::numerics::nn::Linear;
use crate::numerics::{ParamStore, SeedStream, Tape, Tensor, Var};

pub const PREFIX: &str = "fusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_f: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub use_cross_attention: bool,
    pub use_fmri: bool,
    /// Hidden width of an optional GELU layer before the classifier; 0 keeps
    /// the classifier a single affine map.
    pub classifier_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_f: 64,
            heads: 1,
            num_classes: 8,
            use_cross_attention: true,
            use_fmri: true,
            classifier_hidden: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.heads == 0 || !self.d_f.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_f {} with {} heads", self.d_f, self.heads)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Cross-attention is only built when there is a brain branch to attend to.
    pub fn cross_attention_active(&self) -> bool {
        self.use_fmri && self.use_cross_attention
    }
}

/// Fusion result for one sample. The attention features are empty when the
/// variant does not compute them.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub x_vb: Vec<f32>,
    pub x_bv: Vec<f32>,
    pub x_j: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Tape handles of a batched fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub x_vb: Option<Var>,
    pub x_bv: Option<Var>,
    pub x_j: Option<Var>,
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, d_query: usize, d_context: usize, d_f: usize, heads: usize, seed: SeedStream) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, d_f, seed)?,
            k: Linear::new(store, &format!("{name}.k"), d_context, d_f, seed)?,
            v: Linear::new(store, &format!("{name}.v"), d_context, d_f, seed)?,
            heads,
        })
    }

    /// `query: [B, d_q]`, `context: [B, T, d_c]` to `[B, d_f]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let b = tape.shape(query)[0];
        let q = self.q.forward(tape, store, query)?;
        let d_f = tape.shape(q)[1];
        let q = tape.reshape(q, &[b, 1, d_f])?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let (q, k, v) = (
            tape.split_heads(q, self.heads)?,
            tape.split_heads(k, self.heads)?,
            tape.split_heads(v, self.heads)?,
        );
        let o = tape.attention(q, k, v)?;
        let o = tape.merge_heads(o, self.heads)?;
        tape.reshape(o, &[b, d_f])
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

impl Classifier {
    pub fn in_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.out.in_dim, |h| h.in_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let width = *tape.shape(features).last().unwrap_or(&0);
        if width != self.in_dim() {
            return Err(Error::dim("classify", tape.shape(features), &[self.in_dim()]));
        }
        let x = match &self.hidden {
            Some(h) => {
                let x = h.forward(tape, store, features)?;
                tape.gelu(x)
            }
            None => features,
        };
        self.out.forward(tape, store, x)
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub d_v: usize,
    pub d_b: usize,
    /// Image CLS queries brain patches.
    pub vb: Option<CrossAttention>,
    /// Brain CLS queries image patches.
    pub bv: Option<CrossAttention>,
    pub classifier: Classifier,
}

impl FusionModel {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, d_v: usize, d_b: usize, seed: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let seed = seed.split_str(PREFIX);
        let (vb, bv, in_dim) = if cfg.cross_attention_active() {
            (
                Some(CrossAttention::new(store, &format!("{PREFIX}.vb"), d_v, d_b, cfg.d_f, cfg.heads, seed)?),
                Some(CrossAttention::new(store, &format!("{PREFIX}.bv"), d_b, d_v, cfg.d_f, cfg.heads, seed)?),
                2 * cfg.d_f + d_v,
            )
        } else if cfg.use_fmri {
            (None, None, d_v + d_b)
        } else {
            (None, None, 2 * d_v)
        };
        let (hidden, out_in) = if cfg.classifier_hidden > 0 {
            let h = Linear::new(store, &format!("{PREFIX}.classifier_hidden"), in_dim, cfg.classifier_hidden, seed)?;
            (Some(h), cfg.classifier_hidden)
        } else {
            (None, in_dim)
        };
        let out = Linear::new(store, &format!("{PREFIX}.classifier"), out_in, cfg.num_classes, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            d_v,
            d_b,
            vb,
            bv,
            classifier: Classifier { hidden, out },
        })
    }

    /// Batched pass. `brain` is `(F_c [B, d_b], F_p [B, N_f, d_b])` and is
    /// required unless the variant drops the brain branch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        i_c: Var,
        i_p: Var,
        brain: Option<(Var, Var)>,
    ) -> Result<FusionVars> {
        let gap = tape.mean_tokens(i_p)?;
        let (x_vb, x_bv, x_j, features) = match (&self.vb, &self.bv, self.cfg.use_fmri) {
            (Some(vb), Some(bv), _) => {
                let (f_c, f_p) = brain.ok_or_else(|| Error::Input("fusion needs brain tokens".into()))?;
                let x_vb = vb.forward(tape, store, i_c, f_p)?;
                let x_bv = bv.forward(tape, store, f_c, i_p)?;
                let x_j = tape.concat(&[x_vb, x_bv])?;
                let features = tape.concat(&[x_j, gap])?;
                (Some(x_vb), Some(x_bv), Some(x_j), features)
            }
            (_, _, true) => {
                let (f_c, _) = brain.ok_or_else(|| Error::Input("fusion needs brain tokens".into()))?;
                (None, None, None, tape.concat(&[i_c, f_c])?)
            }
            (_, _, false) => (None, None, None, tape.concat(&[i_c, gap])?),
        };
        let logits = self.classifier.forward(tape, store, features)?;
        Ok(FusionVars {
            x_vb,
            x_bv,
            x_j,
            features,
            logits,
        })
    }

    fn single(&self, store: &ParamStore, img: &ImageTokens, brain: Option<&FmriTokens>) -> Result<FusionOutput> {
        let mut tape = Tape::new();
        let i_c = tape.constant(Tensor::new(vec![1, img.cls.len()], img.cls.clone())?);
        let mut shape = vec![1];
        shape.extend_from_slice(img.patches.shape());
        let i_p = tape.constant(img.patches.reshaped(&shape)?);
        let brain = match brain {
            Some(b) => {
                let f_c = tape.constant(Tensor::new(vec![1, b.cls.len()], b.cls.clone())?);
                let mut shape = vec![1];
                shape.extend_from_slice(b.patches.shape());
                let f_p = tape.constant(b.patches.reshaped(&shape)?);
                Some((f_c, f_p))
            }
            None => None,
        };
        let out = self.forward(&mut tape, store, i_c, i_p, brain)?;
        let take = |v: Option<Var>| v.map_or_else(Vec::new, |v| tape.value(v).data().to_vec());
        Ok(FusionOutput {
            x_vb: take(out.x_vb),
            x_bv: take(out.x_bv),
            x_j: take(out.x_j),
            logits: tape.value(out.logits).data().to_vec(),
        })
    }

    /// Cross-attention fusion of one sample.
    pub fn fuse(&self, store: &ParamStore, img: &ImageTokens, brain: &FmriTokens) -> Result<FusionOutput> {
        if !self.cfg.cross_attention_active() {
            return Err(Error::Config("model was built without cross-attention".into()));
        }
        self.single(store, img, Some(brain))
    }

    /// Classifier over `[I_c, F_c]`, or over `[I_c, GAP(I_p)]` when the brain
    /// branch is dropped.
    pub fn fuse_concat_only(&self, store: &ParamStore, img: &ImageTokens, brain: Option<&FmriTokens>) -> Result<FusionOutput> {
        if self.cfg.cross_attention_active() {
            return Err(Error::Config("model was built with cross-attention".into()));
        }
        self.single(store, img, brain)
    }

    pub fn classify(&self, store: &ParamStore, features: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, features.len()], features.to_vec())?);
        let logits = self.classifier.forward(&mut tape, store, x)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::numerics::rng::normal;
    use crate::objective::cross_entropy_var;
    use nalgebra::{DMatrix, DVector};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeedStream(seed).rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
    }

    fn img(d_v: usize, n: usize, seed: u64) -> ImageTokens {
        ImageTokens {
            cls: random(&[d_v], seed).into_data(),
            patches: random(&[n, d_v], seed + 100),
        }
    }

    fn brain(d_b: usize, n: usize, seed: u64) -> FmriTokens {
        FmriTokens {
            cls: random(&[d_b], seed).into_data(),
            patches: random(&[n, d_b], seed + 200),
        }
    }

    fn project(store: &ParamStore, lin: &Linear, rows: &Tensor) -> Vec<Vec<f64>> {
        let (w, b) = (store.get(lin.weight).data(), store.get(lin.bias).data());
        (0..rows.rows())
            .map(|r| {
                (0..lin.out_dim)
                    .map(|j| {
                        rows.row(r).iter().enumerate().map(|(i, x)| *x as f64 * w[i * lin.out_dim + j] as f64).sum::<f64>()
                            + b[j] as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn joint_feature_is_concatenation() {
        let cfg = FusionConfig { d_f: 6, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 5, 7, SeedStream(1)).unwrap();
        let out = m.fuse(&store, &img(5, 4, 1), &brain(7, 3, 2)).unwrap();
        assert_eq!(out.x_j.len(), 12);
        assert_eq!(out.x_j, [out.x_vb.clone(), out.x_bv.clone()].concat());
        assert_eq!(out.logits.len(), 8);
    }

    #[test]
    fn single_brain_token_returns_its_value_row() {
        let cfg = FusionConfig { d_f: 4, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 3, 5, SeedStream(2)).unwrap();
        let b = brain(5, 1, 3);
        let out = m.fuse(&store, &img(3, 2, 4), &b).unwrap();
        let v = project(&store, &m.vb.as_ref().unwrap().v, &b.patches);
        for j in 0..4 {
            assert!((out.x_vb[j] as f64 - v[0][j]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_query_averages_value_rows() {
        let cfg = FusionConfig { d_f: 4, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 3, 5, SeedStream(2)).unwrap();
        let q = &m.vb.as_ref().unwrap().q;
        store.get_mut(q.weight).data_mut().fill(0.0);
        store.get_mut(q.bias).data_mut().fill(0.0);
        let b = brain(5, 6, 3);
        let out = m.fuse(&store, &img(3, 2, 4), &b).unwrap();
        let v = project(&store, &m.vb.as_ref().unwrap().v, &b.patches);
        for j in 0..4 {
            let mean = v.iter().map(|r| r[j]).sum::<f64>() / 6.0;
            assert!((out.x_vb[j] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_dims_match_step_by_step_evaluation() {
        let cfg = FusionConfig { d_f: 2, num_classes: 3, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 2, 2, SeedStream(5)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 30.0);
        }
        let (i, b) = (img(2, 3, 6), brain(2, 2, 7));
        let out = m.fuse(&store, &i, &b).unwrap();

        let attend = |att: &CrossAttention, query: &[f32], ctx: &Tensor| -> Vec<f64> {
            let q = project(&store, &att.q, &Tensor::new(vec![1, query.len()], query.to_vec()).unwrap());
            let k = project(&store, &att.k, ctx);
            let v = project(&store, &att.v, ctx);
            let s: Vec<f64> = k.iter().map(|kr| (q[0][0] * kr[0] + q[0][1] * kr[1]) / 2f64.sqrt()).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..2).map(|j| (0..e.len()).map(|r| e[r] / z * v[r][j]).sum()).collect()
        };
        let x_vb = attend(m.vb.as_ref().unwrap(), &i.cls, &b.patches);
        let x_bv = attend(m.bv.as_ref().unwrap(), &b.cls, &i.patches);
        let gap: Vec<f64> = (0..2).map(|j| (0..3).map(|r| i.patches.row(r)[j] as f64).sum::<f64>() / 3.0).collect();
        let feat: Vec<f32> = x_vb.iter().chain(&x_bv).chain(&gap).map(|&v| v as f32).collect();
        let logits = project(&store, &m.classifier.out, &Tensor::new(vec![1, 6], feat).unwrap());
        for j in 0..2 {
            assert!((out.x_vb[j] as f64 - x_vb[j]).abs() < 1e-4);
            assert!((out.x_bv[j] as f64 - x_bv[j]).abs() < 1e-4);
        }
        for c in 0..3 {
            assert!((out.logits[c] as f64 - logits[0][c]).abs() < 1e-3 * logits[0][c].abs().max(1.0));
        }
    }

    #[test]
    fn attention_features_are_convex_combinations() {
        let cfg = FusionConfig { d_f: 4, ..Default::default() };
        for seed in 0..10 {
            let mut store = ParamStore::new();
            let m = FusionModel::new(&mut store, &cfg, 3, 3, SeedStream(seed)).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
            let (i, b) = (img(3, 3, seed + 10), brain(3, 3, seed + 20));
            let out = m.fuse(&store, &i, &b).unwrap();
            for (x, att, ctx) in [
                (&out.x_vb, m.vb.as_ref().unwrap(), &b.patches),
                (&out.x_bv, m.bv.as_ref().unwrap(), &i.patches),
            ] {
                // solve [V^T; 1^T] w = [x; 1]
                let v = project(&store, &att.v, ctx);
                let a = DMatrix::from_fn(5, 3, |r, c| if r < 4 { v[c][r] } else { 1.0 });
                let rhs = DVector::from_fn(5, |r, _| if r < 4 { x[r] as f64 } else { 1.0 });
                let w = a.clone().svd(true, true).solve(&rhs, 1e-12).unwrap();
                let resid = (&a * &w - &rhs).norm();
                assert!(resid < 1e-4, "residual {resid}");
                assert!(w.iter().all(|&wi| wi > -1e-4), "{w}");
            }
        }
    }

    #[test]
    fn variant_widths_and_parameters() {
        let names = |cfg: &FusionConfig| {
            let mut store = ParamStore::new();
            FusionModel::new(&mut store, cfg, 6, 5, SeedStream(0)).unwrap();
            store.iter().map(|(_, n, _)| n.to_string()).collect::<Vec<_>>()
        };
        let full = names(&FusionConfig::default());
        let concat = names(&FusionConfig { use_cross_attention: false, ..Default::default() });
        let no_fmri = names(&FusionConfig { use_fmri: false, ..Default::default() });
        assert_eq!(full.len(), 14);
        assert!(full.iter().any(|n| n.starts_with("fusion.vb.")));
        assert!(concat.iter().chain(&no_fmri).all(|n| n.starts_with("fusion.classifier.")));

        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &FusionConfig { use_cross_attention: false, ..Default::default() }, 6, 5, SeedStream(0)).unwrap();
        assert_eq!(m.classifier.in_dim(), 11);
        let m = FusionModel::new(&mut ParamStore::new(), &FusionConfig { use_fmri: false, ..Default::default() }, 6, 5, SeedStream(0)).unwrap();
        assert_eq!(m.classifier.in_dim(), 12);
        let m = FusionModel::new(&mut ParamStore::new(), &FusionConfig::default(), 6, 5, SeedStream(0)).unwrap();
        assert_eq!(m.classifier.in_dim(), 2 * 64 + 6);
    }

    #[test]
    fn concat_only_is_classifier_on_concatenation() {
        let cfg = FusionConfig { use_cross_attention: false, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 4, 3, SeedStream(3)).unwrap();
        let (i, b) = (img(4, 2, 1), brain(3, 2, 2));
        let out = m.fuse_concat_only(&store, &i, Some(&b)).unwrap();
        assert!(out.x_vb.is_empty() && out.x_bv.is_empty() && out.x_j.is_empty());
        let feat: Vec<f32> = i.cls.iter().chain(&b.cls).copied().collect();
        assert_eq!(out.logits, m.classify(&store, &feat).unwrap());
        assert!(m.fuse(&store, &i, &b).is_err());

        let no_fmri = FusionConfig { use_fmri: false, ..cfg };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &no_fmri, 4, 3, SeedStream(3)).unwrap();
        let gap: Vec<f32> = (0..4).map(|j| (i.patches.row(0)[j] + i.patches.row(1)[j]) / 2.0).collect();
        let feat: Vec<f32> = i.cls.iter().chain(&gap).copied().collect();
        let out = m.fuse_concat_only(&store, &i, None).unwrap();
        for (a, b) in out.logits.iter().zip(m.classify(&store, &feat).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_brain_cls_gives_no_brain_gradient() {
        let cfg = FusionConfig { use_cross_attention: false, num_classes: 3, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 4, 3, SeedStream(3)).unwrap();
        let i_c = random(&[2, 4], 1);
        let i_p = random(&[2, 2, 4], 2);
        let f_c = Tensor::zeros(&[2, 3]);
        let f_p = random(&[2, 2, 3], 3);
        let ids = vec![m.classifier.out.weight];
        let report = grad_check(&mut store, &ids, 1e-3, |tape, s| {
            let (a, b, c, d) = (
                tape.constant(i_c.clone()),
                tape.constant(i_p.clone()),
                tape.constant(f_c.clone()),
                tape.constant(f_p.clone()),
            );
            let out = m.forward(tape, s, a, b, Some((c, d)))?;
            cross_entropy_var(tape, out.logits, &[0, 2])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-3);
        let mut tape = Tape::new();
        let (a, b, c, d) = (
            tape.constant(i_c.clone()),
            tape.constant(i_p.clone()),
            tape.constant(f_c.clone()),
            tape.constant(f_p.clone()),
        );
        let out = m.forward(&mut tape, &store, a, b, Some((c, d))).unwrap();
        let loss = cross_entropy_var(&mut tape, out.logits, &[0, 2]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = g.param(m.classifier.out.weight).unwrap();
        // rows 4..7 of the [7, 3] weight read F_c
        assert!(gw[4 * 3..].iter().all(|&v| v == 0.0));
        assert!(gw[..4 * 3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn classifier_identities() {
        let cfg = FusionConfig { use_fmri: false, num_classes: 3, ..Default::default() };
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, &cfg, 2, 2, SeedStream(3)).unwrap();
        let (w, b) = (m.classifier.out.weight, m.classifier.out.bias);
        store.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let saved = store.get(w).clone();
        store.get_mut(w).data_mut().fill(0.0);
        assert_eq!(m.classify(&store, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        *store.get_mut(w) = saved;
        let out = m.classify(&store, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let wd = store.get(w).data();
        for c in 0..3 {
            assert!((out[c] - (wd[2 * 3 + c] + store.get(b).data()[c])).abs() < 1e-6);
        }
        let x = [0.3f32, -0.7, 1.1, 0.2];
        let out = m.classify(&store, &x).unwrap();
        for c in 0..3 {
            let direct: f32 = (0..4).map(|i| x[i] * wd[i * 3 + c]).sum::<f32>() + store.get(b).data()[c];
            assert!((out[c] - direct).abs() < 1e-5);
        }
        assert!(matches!(m.classify(&store, &[1.0]), Err(Error::Dimension { .. })));
    }
}
