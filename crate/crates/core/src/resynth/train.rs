//! Shared optimizer loop for the three strategies.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::snap_f32;
use crate::error::{Error, Result};
use crate::nnet::{adam_step, AdamHyper, AdamState, LrSchedule, ParameterSet};

/// Rows per gradient work unit. The partition depends only on the batch, so
/// the reduction order and the result do not depend on the thread count.
pub const GRAD_CHUNK: usize = 128;

/// Stream ids carved out of one training seed.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const BATCH_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: u64,
    /// Random crops per batch.
    pub batch_size: usize,
    /// Frames per crop.
    pub crop_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Loss records are means over windows of this many steps.
    pub log_every: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        LrSchedule::new(self.peak_lr, self.warmup_steps, self.steps)?;
        if self.batch_size == 0 || self.crop_frames == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size, crop_frames and log_every must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<LossRecord>,
    pub optimizer: AdamState,
}

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `hyper.steps` Adam updates. `draw` builds a batch from the batch
/// stream; `loss_grad` returns the batch loss and its gradient. Parameters
/// are rounded to f32 at the end so checkpoints reload them exactly.
pub(crate) fn run_training<B>(
    params: &mut ParameterSet,
    hyper: &TrainHyper,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<B>,
    loss_grad: impl Fn(&ParameterSet, &B) -> Result<(f64, Vec<f64>)>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    let schedule = LrSchedule::new(hyper.peak_lr, hyper.warmup_steps, hyper.steps)?;
    let mut rng = rng_stream(hyper.seed, BATCH_STREAM);
    let mut state = AdamState::new(params.len());
    let mut losses = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0u64;
    for step in 1..=hyper.steps {
        let batch = draw(&mut rng)?;
        let (loss, grads) = loss_grad(params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let lr = schedule.at(step);
        let opt = AdamHyper {
            lr,
            weight_decay: hyper.weight_decay,
            ..AdamHyper::default()
        };
        adam_step(params.values_mut(), &grads, &mut state, &opt)?;
        window += loss;
        window_len += 1;
        if step % hyper.log_every == 0 || step == hyper.steps {
            losses.push(LossRecord {
                step,
                lr,
                loss: window / window_len as f64,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    for v in params.values_mut() {
        *v = snap_f32(*v);
    }
    Ok(TrainOutcome {
        losses,
        optimizer: state,
    })
}

/// Evaluates `f` on fixed [`GRAD_CHUNK`]-row slices of a `rows`-row batch in
/// parallel and sums losses and gradients in chunk order.
pub(crate) fn chunked(
    num_params: usize,
    rows: usize,
    f: impl Fn(Range<usize>, &mut [f64]) -> Result<f64> + Sync,
) -> Result<(f64, Vec<f64>)> {
    let ranges: Vec<Range<usize>> = (0..rows)
        .step_by(GRAD_CHUNK)
        .map(|a| a..(a + GRAD_CHUNK).min(rows))
        .collect();
    let parts: Vec<(f64, Vec<f64>)> = ranges
        .into_par_iter()
        .map(|r| {
            let mut g = vec![0.0; num_params];
            let loss = f(r, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap_or((0.0, vec![0.0; num_params]));
    for (l, g) in iter {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grads))
}
