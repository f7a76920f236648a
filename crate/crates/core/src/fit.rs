//! Minibatch plumbing shared by the pretraining and fusion loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{permutation, SeedStream};
use crate::numerics::{AdamW, AdamWConfig, LrSchedule, ParamStore, Tape, Var};

/// Settings for a supervised warm-up run of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_epochs: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            peak_lr: 2e-3,
            floor_lr: 1e-5,
            warmup_epochs: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Shuffled minibatches of `0..n` for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: SeedStream, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = seed.split_str("shuffle").split(epoch as u64).rng();
    permutation(&mut rng, n)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Runs `opts.epochs` epochs of AdamW over the store's trainable parameters.
/// `step` records the loss of one batch of sample indices on the tape.
/// Returns the mean loss of each epoch.
pub fn train_loop<F>(store: &mut ParamStore, n: usize, opts: &PretrainOptions, mut step: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore, &[usize]) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    let steps_per_epoch = n.div_ceil(opts.batch_size.max(1)) as u64;
    let schedule = LrSchedule::for_run(
        opts.peak_lr,
        opts.floor_lr,
        opts.warmup_epochs,
        steps_per_epoch,
        opts.epochs as u64,
    )?;
    let mut optim = AdamW::new(store, opts.optimizer);
    let seed = SeedStream(opts.seed);
    let mut global = 0u64;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in epoch_batches(n, opts.batch_size, seed, epoch) {
            global += 1;
            let mut tape = Tape::new();
            let loss = step(&mut tape, store, &batch)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value} at step {global}")));
            }
            let grads = tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&grads);
            optim.step(store, schedule.lr_at(global)?)?;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Copies values of every `prefix.*` parameter from `src` into the
/// same-named parameter of `dst`.
pub fn copy_prefix(src: &ParamStore, dst: &mut ParamStore, prefix: &str) -> Result<()> {
    let dotted = format!("{prefix}.");
    for (_, name, t) in src.iter().filter(|(_, n, _)| n.starts_with(&dotted)) {
        let id = dst
            .id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        if dst.get(id).shape() != t.shape() {
            return Err(Error::dim("copy parameters", dst.get(id).shape(), t.shape()));
        }
        dst.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
