//! Held-out evaluation: one row per strategy run, topline rows decoded from
//! the full code stack and from `z`, and a per-layer sweep.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{code_accuracy, embed_mse, estoi, si_snr};
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::resynth::{resynthesize_codes, Strategy};
use crate::rvq::{bitrate, dequantize_values, quantize_values, RvqModel};
use crate::transform::FrameTransform;

pub const ESTOI_NOTE: &str = "ESTOI uses 15 third-octave bands from 150 Hz with the top band clipped at \
the 4 kHz Nyquist limit, 256-sample frames at 50% overlap and 30-frame segments; the usual design runs \
at 10 kHz and reaches higher bands";

/// One strategy to evaluate; rows are keyed by its method and measured NFE.
#[derive(Clone, Copy)]
pub struct MethodRun<'a> {
    pub strategy: Strategy<'a>,
}

pub struct EvalInputs<'a> {
    pub references: &'a [Waveform],
    pub transform: &'a FrameTransform,
    pub rvq: &'a RvqModel,
    pub runs: Vec<MethodRun<'a>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `ground_truth`, `z`, `rvq_all`, `baseline`, or a method name.
    pub method: String,
    pub nfe: usize,
    pub utterances: usize,
    pub si_snr_mean: f64,
    pub si_snr_std: f64,
    pub estoi_mean: f64,
    pub estoi_std: f64,
    pub embed_mse: f64,
    /// Per-layer accuracy of predicted codes, for code-predicting methods.
    pub code_accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    /// `1..=N` for partial code sums, `z` for the unquantized embedding.
    pub layers: String,
    pub si_snr_mean: f64,
    pub estoi_mean: f64,
    pub embed_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estoi_note: String,
    pub sample_rate_hz: u32,
    pub bitrate_bps: f64,
    pub rows: Vec<EvalRow>,
    pub layer_sweep: Vec<LayerSweepRow>,
}

pub const REPORT_CSV_HEADER: &str =
    "method,nfe,utterances,si_snr_mean,si_snr_std,estoi_mean,estoi_std,embed_mse,code_accuracy";
pub const SWEEP_CSV_HEADER: &str = "layers,si_snr_mean,estoi_mean,embed_mse";

impl EvalReport {
    pub fn row(&self, method: &str, nfe: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.nfe == nfe)
    }

    /// Fixed six-decimal formatting; code accuracies are `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let acc = r
                .code_accuracy
                .as_ref()
                .map(|a| a.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.method, r.nfe, r.utterances, r.si_snr_mean, r.si_snr_std, r.estoi_mean, r.estoi_std, r.embed_mse, acc
            );
        }
        out
    }

    pub fn layer_sweep_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.layer_sweep {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.layers, r.si_snr_mean, r.estoi_mean, r.embed_mse);
        }
        out
    }
}

/// Scores gathered for one utterance under one estimate.
#[derive(Debug, Clone)]
struct Score {
    si_snr: f64,
    estoi: f64,
    mse: f64,
    nfe: usize,
    accuracy: Option<Vec<f64>>,
}

struct UtteranceScores {
    ground_truth: Score,
    sweep: Vec<Score>,
    z: Score,
    runs: Vec<Score>,
}

fn score(transform: &FrameTransform, estimate: &ndarray::Array2<f64>, z: &ndarray::Array2<f64>, reference: &Waveform) -> Result<Score> {
    let w = transform.decode_values(estimate)?;
    Ok(Score {
        si_snr: si_snr(&w, reference)?,
        estoi: estoi(&w, reference)?,
        mse: embed_mse(estimate, z)?,
        nfe: 0,
        accuracy: None,
    })
}

fn evaluate_utterance(inputs: &EvalInputs<'_>, index: usize) -> Result<UtteranceScores> {
    let transform = inputs.transform;
    let rvq = inputs.rvq;
    let z = transform.encode(&inputs.references[index])?.into_values();
    let covered = z.nrows() * transform.config().hop;
    let reference = inputs.references[index].truncated(covered)?;
    let codes = quantize_values(rvq, &z)?.codes;
    let ground_truth = Score {
        si_snr: si_snr(&reference, &reference)?,
        estoi: estoi(&reference, &reference)?,
        mse: 0.0,
        nfe: 0,
        accuracy: None,
    };
    let sweep = (1..=rvq.num_layers())
        .map(|i| score(transform, &dequantize_values(rvq, &codes, i)?, &z, &reference))
        .collect::<Result<Vec<_>>>()?;
    let z_score = score(transform, &z, &z, &reference)?;
    let layer1 = codes.layer(1);
    let mut runs = Vec::with_capacity(inputs.runs.len());
    for (r, run) in inputs.runs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
        rng.set_stream(((r as u64) << 32) | index as u64);
        let out = resynthesize_codes(run.strategy, &layer1, rvq, &mut rng)?;
        let mut s = score(transform, &out.embedding, &z, &reference)?;
        s.nfe = out.nfe;
        s.accuracy = out.codes.as_ref().map(|c| code_accuracy(c, &codes)).transpose()?;
        runs.push(s);
    }
    Ok(UtteranceScores {
        ground_truth,
        sweep,
        z: z_score,
        runs,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(method: &str, scores: &[&Score]) -> Result<EvalRow> {
    let nfe = scores[0].nfe;
    if scores.iter().any(|s| s.nfe != nfe) {
        return Err(Error::invalid(format!("{method}: NFE varies across utterances")));
    }
    let (si_snr_mean, si_snr_std) = mean_std(scores.iter().map(|s| s.si_snr));
    let (estoi_mean, estoi_std) = mean_std(scores.iter().map(|s| s.estoi));
    let (embed_mse, _) = mean_std(scores.iter().map(|s| s.mse));
    let code_accuracy = match &scores[0].accuracy {
        Some(first) => {
            let mut acc = vec![0.0; first.len()];
            for s in scores {
                let a = s.accuracy.as_ref().ok_or_else(|| Error::invalid("missing code accuracy"))?;
                for (t, v) in acc.iter_mut().zip(a) {
                    *t += v;
                }
            }
            Some(acc.into_iter().map(|t| t / scores.len() as f64).collect())
        }
        None => None,
    };
    let row = EvalRow {
        method: method.to_string(),
        nfe,
        utterances: scores.len(),
        si_snr_mean,
        si_snr_std,
        estoi_mean,
        estoi_std,
        embed_mse,
        code_accuracy,
    };
    if !(row.si_snr_mean.is_finite() && row.estoi_mean.is_finite() && row.embed_mse.is_finite()) {
        return Err(Error::NonFinite("evaluation means"));
    }
    Ok(row)
}

/// Evaluates every run on every reference utterance. Utterances are scored
/// in parallel and aggregated in input order, so the report is deterministic.
pub fn eval_suite(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    if inputs.references.is_empty() {
        return Err(Error::invalid("no reference utterances"));
    }
    let per_utt: Vec<UtteranceScores> = (0..inputs.references.len())
        .into_par_iter()
        .map(|i| evaluate_utterance(inputs, i))
        .collect::<Result<_>>()?;
    let n_layers = inputs.rvq.num_layers();
    let column = |f: &dyn Fn(&UtteranceScores) -> &Score| per_utt.iter().map(f).collect::<Vec<&Score>>();

    let mut rows = vec![
        aggregate("ground_truth", &column(&|u| &u.ground_truth))?,
        aggregate("z", &column(&|u| &u.z))?,
        aggregate("rvq_all", &column(&|u| &u.sweep[n_layers - 1]))?,
        aggregate("baseline", &column(&|u| &u.sweep[0]))?,
    ];
    for (r, run) in inputs.runs.iter().enumerate() {
        rows.push(aggregate(run.strategy.method().as_str(), &column(&|u| &u.runs[r]))?);
    }
    let mut layer_sweep = Vec::with_capacity(n_layers + 1);
    for i in 0..n_layers {
        let row = aggregate("sweep", &column(&|u| &u.sweep[i]))?;
        layer_sweep.push(LayerSweepRow {
            layers: (i + 1).to_string(),
            si_snr_mean: row.si_snr_mean,
            estoi_mean: row.estoi_mean,
            embed_mse: row.embed_mse,
        });
    }
    let zrow = &rows[1];
    layer_sweep.push(LayerSweepRow {
        layers: "z".to_string(),
        si_snr_mean: zrow.si_snr_mean,
        estoi_mean: zrow.estoi_mean,
        embed_mse: zrow.embed_mse,
    });
    let cfg = inputs.transform.config();
    Ok(EvalReport {
        estoi_note: ESTOI_NOTE.to_string(),
        sample_rate_hz: cfg.sample_rate_hz,
        bitrate_bps: bitrate(inputs.rvq, cfg.frame_rate_hz()),
        rows,
        layer_sweep,
    })
}
