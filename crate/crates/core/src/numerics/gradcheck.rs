//! Central-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Result of checking one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub frozen: bool,
    /// `max |analytic - numeric| / max(1, |numeric|)`; 0 for frozen tensors.
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Input(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::Numerical(format!("objective is {x} at the probe point")));
    }
    Ok(x as f64)
}

/// Compares tape gradients of `f` against central differences with step
/// `eps` for every entry of the listed parameters. Frozen parameters are
/// reported with their analytic gradient only, which is zero by
/// construction.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Range {
            what: "grad_check eps",
            value: eps as f64,
            range: "[1e-4, 1e-2]".into(),
        });
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.value(out).all_finite() {
        return Err(Error::Numerical("objective is not finite at the probe point".into()));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let analytic: Vec<f32> = grads.param(id).map_or_else(|| vec![0.0; n], <[f32]>::to_vec);
        let max_abs_analytic = analytic.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
        let frozen = !store.get(id).requires_grad();
        let mut max_rel_error = 0.0f64;
        if !frozen {
            for i in 0..n {
                let orig = store.get(id).data()[i];
                let plus = orig + eps;
                let minus = orig - eps;
                store.get_mut(id).data_mut()[i] = plus;
                let f_plus = eval_scalar(store, &f);
                store.get_mut(id).data_mut()[i] = minus;
                let f_minus = eval_scalar(store, &f);
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (f_plus? - f_minus?) / (plus as f64 - minus as f64);
                let err = (analytic[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
                max_rel_error = max_rel_error.max(err);
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries: n,
            frozen,
            max_rel_error,
            max_abs_analytic,
        });
    }
    Ok(GradCheckReport { params })
}
