//! Objective metrics on waveforms and embeddings, and the evaluation report.

mod estoi;
mod report;

pub use estoi::{estoi, EstoiConfig};
pub use report::{eval_suite, EvalInputs, EvalReport, EvalRow, LayerSweepRow, MethodRun};

use ndarray::Array2;

use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::rvq::CodeSequence;

/// Reported instead of +∞ when the error energy vanishes.
pub const SI_SNR_CAP_DB: f64 = 100.0;

/// Scale-invariant SNR of `estimate` against `reference`, in dB, after mean
/// removal. Clamped to `±SI_SNR_CAP_DB`.
pub fn si_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_samples(estimate.samples(), reference.samples())
}

pub fn si_snr_samples(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Error::check_dim(reference.len(), estimate.len())?;
    if reference.len() < 2 {
        return Err(Error::invalid("SI-SNR needs at least two samples"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (me, mr) = (mean(estimate), mean(reference));
    let est: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let refr: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let ref_energy: f64 = refr.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::invalid("reference is zero after mean removal"));
    }
    let dot: f64 = est.iter().zip(&refr).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut err_energy = 0.0;
    for (e, r) in est.iter().zip(&refr) {
        let t = alpha * r;
        target_energy += t * t;
        err_energy += (e - t) * (e - t);
    }
    let cap_ratio = 10f64.powf(SI_SNR_CAP_DB / 10.0);
    if err_energy <= target_energy / cap_ratio {
        return Ok(SI_SNR_CAP_DB);
    }
    if target_energy <= err_energy / cap_ratio {
        return Ok(-SI_SNR_CAP_DB);
    }
    Ok(10.0 * (target_energy / err_energy).log10())
}

/// Per-layer fraction of frames whose predicted index matches the truth.
pub fn code_accuracy(predicted: &CodeSequence, truth: &CodeSequence) -> Result<Vec<f64>> {
    Error::check_dim(truth.len(), predicted.len())?;
    Error::check_dim(truth.num_layers(), predicted.num_layers())?;
    let l = truth.len() as f64;
    Ok((0..truth.num_layers())
        .map(|c| {
            let hits = predicted
                .indices()
                .column(c)
                .iter()
                .zip(truth.indices().column(c))
                .filter(|(a, b)| a == b)
                .count();
            hits as f64 / l
        })
        .collect())
}

/// Mean over all entries of the squared difference.
pub fn embed_mse(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    Error::check_dim(truth.nrows(), estimate.nrows())?;
    Error::check_dim(truth.ncols(), estimate.ncols())?;
    if truth.is_empty() {
        return Err(Error::invalid("empty embeddings"));
    }
    let sum: f64 = estimate
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / truth.len() as f64)
}
