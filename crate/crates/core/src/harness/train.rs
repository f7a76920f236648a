//! Fusion training loop and its metrics log.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Variant};
use super::eval::EvalReport;
use super::model::BmflModel;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::fit::epoch_batches;
use crate::numerics::{AdamW, LrSchedule, OptimizerState, SeedStream, Tape};
use crate::objective::total_loss_var;

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub l_cls: f64,
    pub l_fusion: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: BmflModel,
    pub optimizer: OptimizerState,
    pub log: Vec<StepLog>,
    pub seconds: f64,
}

impl TrainResult {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            params: self.model.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Trains the brain transformer and fusion parameters of `model` on `data`.
/// Frozen backbones are run once per image up front; otherwise every step
/// runs the whole pipeline.
pub fn train(cfg: &RunConfig, mut model: BmflModel, data: &LabeledImages) -> Result<TrainResult> {
    cfg.validate()?;
    if data.num_classes != cfg.fusion.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.fusion.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let start = Instant::now();
    let loss_cfg = cfg.effective_loss();
    let cached = if model.backbones_frozen() {
        Some(model.extract(data)?)
    } else {
        None
    };
    let mut optim = AdamW::new(&model.store, cfg.optimizer);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule::for_run(
        cfg.schedule.peak_lr,
        cfg.schedule.floor_lr,
        cfg.schedule.warmup_epochs,
        steps_per_epoch,
        cfg.epochs as u64,
    )?;
    let seed = SeedStream(cfg.seed).split_str("train");
    let mut log = Vec::with_capacity((steps_per_epoch as usize) * cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, seed, epoch) {
            step += 1;
            let mut tape = Tape::new();
            let vars = match &cached {
                Some(f) => {
                    let (c, p, y) = f.batch(&mut tape, &batch)?;
                    model.forward_features(&mut tape, &model.store, c, p, y)?
                }
                None => model.forward_images(&mut tape, &model.store, &data.batch(&batch)?)?,
            };
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let fused = vars.x_vb.zip(vars.x_bv);
            let loss = total_loss_var(&mut tape, vars.logits, &labels, fused, &loss_cfg)?;
            let r = loss.report;
            if !(r.l_total.is_finite() && r.l_cls.is_finite() && r.l_fusion.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {step} (l_cls {}, l_fusion {}, l_total {})",
                    r.l_cls, r.l_fusion, r.l_total
                )));
            }
            let grads = tape.backward(loss.total)?;
            model.store.zero_grads();
            model.store.accumulate_grads(&grads);
            let lr = schedule.lr_at(step)?;
            optim.step(&mut model.store, lr)?;
            log.push(StepLog {
                step,
                lr,
                l_cls: r.l_cls,
                l_fusion: r.l_fusion,
                l_total: r.l_total,
            });
        }
        if let Some(last) = log.last() {
            log::debug!("epoch {epoch}: l_total {:.4}", last.l_total);
        }
    }
    model.store.zero_grads();
    Ok(TrainResult {
        model,
        optimizer: optim.into_state(),
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run-level summary written next to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub train_seconds: f64,
    pub first_step: Option<StepLog>,
    pub last_step: Option<StepLog>,
    pub eval: Option<EvalReport>,
}

impl RunSummary {
    pub fn new(result: &TrainResult, seed: u64, eval: Option<EvalReport>) -> Self {
        Self {
            variant: result.model.variant,
            seed,
            steps: result.log.len() as u64,
            train_seconds: result.seconds,
            first_step: result.log.first().copied(),
            last_step: result.log.last().copied(),
            eval,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// `step,lr,l_cls,l_fusion,l_total` rows.
pub fn write_metrics_csv<W: Write>(log: &[StepLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(log: &[StepLog], path: &Path) -> Result<()> {
    write_metrics_csv(log, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let log = [StepLog {
            step: 1,
            lr: 5e-5,
            l_cls: 2.0,
            l_fusion: 0.5,
            l_total: 1.8,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,lr,l_cls,l_fusion,l_total\n1,0.00005,2.0,0.5,1.8\n");
    }
}
