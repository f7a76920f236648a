//! Gradient-free evaluation on named splits.

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::model::BmflModel;
use crate::data::{corrupt_dataset, CorruptionSpec, LabeledImages};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::objective::pcc;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub mean_loss: f64,
    /// Mean and standard deviation of the per-sample correlation between the
    /// two fused features; absent without cross-attention.
    pub pcc_mean: Option<f64>,
    pub pcc_std: Option<f64>,
    /// Samples whose correlation was undefined.
    pub pcc_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub rows: Vec<SplitReport>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitReport> {
        self.rows.iter().find(|r| r.split == name)
    }

    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.split(name).map(|r| r.accuracy)
    }

    /// Mean accuracy over every split except `clean_val`.
    pub fn mean_corrupted_accuracy(&self) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.split != "clean_val")
            .map(|r| r.accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// The validation set and its low-light and masked copies.
pub fn standard_splits(cfg: &RunConfig, val: &LabeledImages) -> Result<Vec<(String, LabeledImages)>> {
    let e = &cfg.eval;
    let (dark, _) = corrupt_dataset(val, &CorruptionSpec::low_light(e.low_light_severity, e.corruption_seed))?;
    let (masked, _) = corrupt_dataset(
        val,
        &CorruptionSpec::masked(e.mask_ratio, e.mask_mode, e.corruption_seed),
    )?;
    Ok(vec![
        ("clean_val".to_string(), val.clone()),
        ("low_light".to_string(), dark),
        ("masked".to_string(), masked),
    ])
}

/// Sum of the values in ascending order, so the result does not depend on
/// sample order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn log_softmax_nll(row: &[f32], y: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - row[y] as f64
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_split(model: &BmflModel, name: &str, data: &LabeledImages) -> Result<SplitReport> {
    if data.is_empty() {
        return Err(Error::Input(format!("split {name} is empty")));
    }
    if data.num_classes != model.fusion.cfg.num_classes {
        return Err(Error::Config(format!(
            "split {name} has {} classes, model has {}",
            data.num_classes, model.fusion.cfg.num_classes
        )));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut hits, mut losses, mut rs, mut degenerate) = (0usize, Vec::new(), Vec::new(), 0usize);
    for chunk in order.chunks(CHUNK) {
        let mut tape = Tape::new();
        let vars = model.forward_images(&mut tape, &model.store, &data.batch(chunk)?)?;
        let logits = tape.value(vars.logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let y = data.labels[i];
            hits += (argmax(row) == y) as usize;
            losses.push(log_softmax_nll(row, y));
        }
        if let (Some(a), Some(b)) = (vars.x_vb, vars.x_bv) {
            let (a, b) = (tape.value(a), tape.value(b));
            for r in 0..chunk.len() {
                match pcc(a.row(r), b.row(r)) {
                    Ok(v) => rs.push(v),
                    Err(Error::Degenerate(_)) => degenerate += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let n = data.len() as f64;
    let with_pcc = model.fusion.cfg.cross_attention_active() && !rs.is_empty();
    let (pcc_mean, pcc_std) = if with_pcc {
        let m = sorted_sum(rs.clone()) / rs.len() as f64;
        let var = sorted_sum(rs.iter().map(|r| (r - m).powi(2)).collect()) / rs.len() as f64;
        (Some(m), Some(var.sqrt()))
    } else {
        (None, None)
    };
    Ok(SplitReport {
        split: name.to_string(),
        samples: data.len(),
        accuracy: hits as f64 / n,
        mean_loss: sorted_sum(losses) / n,
        pcc_mean,
        pcc_std,
        pcc_degenerate: degenerate,
    })
}

/// Testing path over every split; weights are only read.
pub fn evaluate(model: &BmflModel, splits: &[(String, LabeledImages)]) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::Input("no splits to evaluate".into()));
    }
    let rows = splits
        .iter()
        .map(|(name, data)| evaluate_split(model, name, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        variant: model.variant,
        rows,
    })
}
