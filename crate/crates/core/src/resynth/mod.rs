//! Resynthesis from first-layer codes: coarse-to-fine code prediction,
//! one-step regression to `z`, and bridge sampling from `x1` toward `z`.
//!
//! Every strategy runs behind a counter of network evaluations, so the NFE
//! reported with each output is measured rather than declared.

mod bridge_model;
mod c2f;
mod checkpoint;
mod data;
mod onestep;
mod train;

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

pub use bridge_model::BridgeModel;
pub use c2f::CoarseToFineModel;
pub use checkpoint::{Checkpoint, CheckpointHeader, ResynthModel, CHECKPOINT_VERSION};
pub use data::{context_window, Crop, FeatureStats, PreparedUtterance, TrainingSet};
pub use onestep::OneStepModel;
pub use train::{LossRecord, TrainHyper, TrainOutcome, GRAD_CHUNK};

use crate::bridge::{ddpm_backward, Denoiser, NoiseSchedule};
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::nnet::Activation;
use crate::rvq::{quantize_values, CodeSequence, RvqModel};
use crate::transform::{EmbeddingSequence, FrameTransform};

/// Network sizes shared by the three strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Neighbouring frames on each side stacked into the input.
    pub context_radius: usize,
    pub time_dim: usize,
    pub stage_dim: usize,
    /// Coarse-to-fine trunk output width feeding the per-stage heads.
    pub trunk_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256; 4],
            activation: Activation::Gelu,
            context_radius: 2,
            time_dim: 32,
            stage_dim: 32,
            trunk_dim: 128,
        }
    }
}

impl NetConfig {
    pub fn window_width(&self, dim: usize) -> usize {
        (2 * self.context_radius + 1) * dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden_dims must be non-empty and positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time_dim must be even and positive"));
        }
        if self.stage_dim == 0 || self.trunk_dim == 0 {
            return Err(Error::invalid("stage_dim and trunk_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    C2f,
    Onestep,
    Bridge,
}

impl Method {
    pub const TRAINABLE: [Method; 3] = [Method::C2f, Method::Onestep, Method::Bridge];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::C2f => "c2f",
            Method::Onestep => "onestep",
            Method::Bridge => "bridge",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "c2f" => Ok(Method::C2f),
            "onestep" => Ok(Method::Onestep),
            "bridge" => Ok(Method::Bridge),
            other => Err(Error::invalid(format!(
                "unknown method {other:?} (expected baseline, c2f, onestep or bridge)"
            ))),
        }
    }
}

/// Predicts per-frame logits over layer `stage`'s codebook from the running
/// sum of the code vectors chosen for layers `1..stage`.
pub trait CodePredictor {
    fn num_layers(&self) -> usize;
    fn stage_logits(&self, partial: &Array2<f64>, stage: usize) -> Result<Array2<f64>>;
}

/// Maps layer-1 code vectors to an estimate of `z`, both in raw units.
pub trait Regressor {
    fn regress(&self, x1: &Array2<f64>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Index of the first maximum.
fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts layers `2..=N` one stage at a time from the layer-1 indices and
/// returns the summed code vectors of all layers with the chosen codes.
pub fn decode_coarse_to_fine(
    predictor: &dyn CodePredictor,
    layer1: &[usize],
    rvq: &RvqModel,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, CodeSequence)> {
    if let DecodeMode::Sample { temperature } = mode {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
    }
    let n = rvq.num_layers();
    Error::check_dim(n, predictor.num_layers())?;
    let l = layer1.len();
    if l == 0 {
        return Err(Error::invalid("no frames to decode"));
    }
    let mut indices = Array2::<usize>::zeros((l, n));
    let mut partial = Array2::<f64>::zeros((l, rvq.dim()));
    let book1 = rvq.codebook(1);
    for (f, &i) in layer1.iter().enumerate() {
        if i >= book1.size() {
            return Err(Error::OutOfRange { index: i, limit: book1.size() });
        }
        indices[[f, 0]] = i;
        partial.row_mut(f).assign(&book1.code(i));
    }
    for stage in 2..=n {
        let logits = predictor.stage_logits(&partial, stage)?;
        Error::check_dim(l, logits.nrows())?;
        Error::check_dim(rvq.codebook_size(), logits.ncols())?;
        let book = rvq.codebook(stage);
        for (f, row) in logits.outer_iter().enumerate() {
            let choice = match mode {
                DecodeMode::Greedy => argmax(row),
                DecodeMode::Sample { temperature } => {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let weights: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
                    WeightedIndex::new(&weights)
                        .map_err(|e| Error::invalid(format!("bad sampling weights: {e}")))?
                        .sample(rng)
                }
            };
            indices[[f, stage - 1]] = choice;
            let mut row = partial.row_mut(f);
            row += &book.code(choice);
        }
    }
    Ok((partial, CodeSequence::new(indices)?))
}

struct CountingPredictor<'a> {
    inner: &'a dyn CodePredictor,
    calls: Cell<usize>,
}

impl CodePredictor for CountingPredictor<'_> {
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    fn stage_logits(&self, partial: &Array2<f64>, stage: usize) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.stage_logits(partial, stage)
    }
}

struct CountingRegressor<'a> {
    inner: &'a dyn Regressor,
    calls: Cell<usize>,
}

impl Regressor for CountingRegressor<'_> {
    fn regress(&self, x1: &Array2<f64>) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.regress(x1)
    }
}

struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: Cell<usize>,
}

impl Denoiser for CountingDenoiser<'_> {
    fn predict(&self, x: &Array2<f64>, x1: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, x1, k)
    }
}

/// How to turn layer-1 codes back into an embedding.
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    /// Decode the layer-1 code vectors as they are.
    Baseline,
    CoarseToFine {
        predictor: &'a (dyn CodePredictor + Sync),
        mode: DecodeMode,
    },
    OneStep {
        regressor: &'a (dyn Regressor + Sync),
    },
    /// Backward sampling in the standardized space defined by `stats`.
    Bridge {
        denoiser: &'a (dyn Denoiser + Sync),
        schedule: &'a NoiseSchedule,
        stats: &'a FeatureStats,
        nfe: usize,
    },
}

impl Strategy<'_> {
    pub fn method(&self) -> Method {
        match self {
            Strategy::Baseline => Method::Baseline,
            Strategy::CoarseToFine { .. } => Method::C2f,
            Strategy::OneStep { .. } => Method::Onestep,
            Strategy::Bridge { .. } => Method::Bridge,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Resynthesis {
    pub embedding: Array2<f64>,
    /// Network evaluations actually performed.
    pub nfe: usize,
    /// Full predicted code stack (coarse-to-fine only).
    pub codes: Option<CodeSequence>,
}

/// Embedding estimate from layer-1 indices alone.
pub fn resynthesize_codes(
    strategy: Strategy<'_>,
    layer1: &[usize],
    rvq: &RvqModel,
    rng: &mut impl Rng,
) -> Result<Resynthesis> {
    if layer1.is_empty() {
        return Err(Error::invalid("no frames to resynthesize"));
    }
    let book1 = rvq.codebook(1);
    if let Some(&bad) = layer1.iter().find(|&&i| i >= book1.size()) {
        return Err(Error::OutOfRange { index: bad, limit: book1.size() });
    }
    let x1 = || {
        let mut out = Array2::zeros((layer1.len(), rvq.dim()));
        for (mut row, &i) in out.outer_iter_mut().zip(layer1) {
            row.assign(&book1.code(i));
        }
        out
    };
    match strategy {
        Strategy::Baseline => Ok(Resynthesis {
            embedding: x1(),
            nfe: 0,
            codes: None,
        }),
        Strategy::CoarseToFine { predictor, mode } => {
            let counter = CountingPredictor {
                inner: predictor,
                calls: Cell::new(0),
            };
            let (embedding, codes) = decode_coarse_to_fine(&counter, layer1, rvq, mode, rng)?;
            Ok(Resynthesis {
                embedding,
                nfe: counter.calls.get(),
                codes: Some(codes),
            })
        }
        Strategy::OneStep { regressor } => {
            let counter = CountingRegressor {
                inner: regressor,
                calls: Cell::new(0),
            };
            let x = x1();
            let embedding = counter.regress(&x)?;
            Error::check_dim(x.nrows(), embedding.nrows())?;
            Error::check_dim(x.ncols(), embedding.ncols())?;
            Ok(Resynthesis {
                embedding,
                nfe: counter.calls.get(),
                codes: None,
            })
        }
        Strategy::Bridge {
            denoiser,
            schedule,
            stats,
            nfe,
        } => {
            let counter = CountingDenoiser {
                inner: denoiser,
                calls: Cell::new(0),
            };
            let x1s = stats.apply(&x1())?;
            let x0s = ddpm_backward(&counter, &x1s, nfe, schedule, rng)?;
            Ok(Resynthesis {
                embedding: stats.invert(&x0s)?,
                nfe: counter.calls.get(),
                codes: None,
            })
        }
    }
}

/// Output of [`resynthesize`]: decoded audio plus the embedding it came from.
#[derive(Debug, Clone)]
pub struct ResynthesizedAudio {
    pub waveform: Waveform,
    pub embedding: EmbeddingSequence,
    pub nfe: usize,
    pub codes: Option<CodeSequence>,
}

/// Encode → quantize → keep layer 1 → estimate the embedding → decode.
pub fn resynthesize(
    strategy: Strategy<'_>,
    waveform: &Waveform,
    transform: &FrameTransform,
    rvq: &RvqModel,
    rng: &mut impl Rng,
) -> Result<ResynthesizedAudio> {
    let z = transform.encode(waveform)?;
    let codes = quantize_values(rvq, z.values())?.codes;
    let out = resynthesize_codes(strategy, &codes.layer(1), rvq, rng)?;
    let embedding = EmbeddingSequence::new(out.embedding, transform.config())?;
    Ok(ResynthesizedAudio {
        waveform: transform.decode(&embedding)?,
        embedding,
        nfe: out.nfe,
        codes: out.codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{OracleDenoiser, NFE_SWEEP};
    use crate::rvq::dequantize_values;
    use crate::rvq::train_rvq_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Puts all mass on the true index of each frame.
    struct TruthStub {
        codes: CodeSequence,
        v: usize,
    }

    impl CodePredictor for TruthStub {
        fn num_layers(&self) -> usize {
            self.codes.num_layers()
        }
        fn stage_logits(&self, partial: &Array2<f64>, stage: usize) -> Result<Array2<f64>> {
            let mut out = Array2::from_elem((partial.nrows(), self.v), -10.0);
            for f in 0..partial.nrows() {
                out[[f, self.codes.indices()[[f, stage - 1]]]] = 10.0;
            }
            Ok(out)
        }
    }

    /// Fixed random logits, independent of the input.
    struct RandomLogits {
        logits: Vec<Array2<f64>>,
    }

    impl CodePredictor for RandomLogits {
        fn num_layers(&self) -> usize {
            self.logits.len() + 1
        }
        fn stage_logits(&self, _: &Array2<f64>, stage: usize) -> Result<Array2<f64>> {
            Ok(self.logits[stage - 2].clone())
        }
    }

    fn toy(seed: u64) -> (RvqModel, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((200, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let (rvq, _) = train_rvq_values(&[z.view()], 8, 8, 10, seed).unwrap();
        (rvq, z)
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Baseline, Method::C2f, Method::Onestep, Method::Bridge] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("ddpm".parse::<Method>().is_err());
    }

    #[test]
    fn truth_stub_reproduces_full_dequantization_in_n_minus_1_calls() {
        let (rvq, z) = toy(1);
        let codes = quantize_values(&rvq, &z).unwrap().codes;
        let stub = TruthStub { codes: codes.clone(), v: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = resynthesize_codes(
            Strategy::CoarseToFine {
                predictor: &stub,
                mode: DecodeMode::Greedy,
            },
            &codes.layer(1),
            &rvq,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.nfe, 7);
        assert_eq!(out.codes.unwrap(), codes);
        assert_eq!(out.embedding, dequantize_values(&rvq, &codes, 8).unwrap());
    }

    #[test]
    fn greedy_is_deterministic_and_cold_sampling_matches_it() {
        let (rvq, z) = toy(2);
        let codes = quantize_values(&rvq, &z).unwrap().codes;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stub = RandomLogits {
            logits: (0..7)
                .map(|_| Array2::from_shape_fn((200, 8), |_| rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        };
        let layer1 = codes.layer(1);
        let run = |mode, seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            decode_coarse_to_fine(&stub, &layer1, &rvq, mode, &mut r).unwrap()
        };
        let (g1, c1) = run(DecodeMode::Greedy, 0);
        let (g2, c2) = run(DecodeMode::Greedy, 99);
        assert_eq!(g1, g2);
        assert_eq!(c1, c2);
        // unique maxima hold almost surely for continuous logits
        let (_, cold) = run(DecodeMode::Sample { temperature: 1e-4 }, 7);
        assert_eq!(cold, c1);
        let (_, warm) = run(DecodeMode::Sample { temperature: 5.0 }, 7);
        assert_ne!(warm, c1);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(decode_coarse_to_fine(&stub, &layer1, &rvq, DecodeMode::Sample { temperature: 0.0 }, &mut r).is_err());
    }

    #[test]
    fn oracle_bridge_recovers_z_for_every_nfe() {
        let (rvq, z) = toy(3);
        let codes = quantize_values(&rvq, &z).unwrap().codes;
        let sched = NoiseSchedule::symmetric(1000, 0.3, 1e-4).unwrap();
        let stats = FeatureStats::fit([z.view()]).unwrap();
        let oracle = OracleDenoiser {
            x0: stats.apply(&z).unwrap(),
            schedule: &sched,
        };
        for nfe in NFE_SWEEP {
            let mut rng = ChaCha8Rng::seed_from_u64(nfe as u64);
            let out = resynthesize_codes(
                Strategy::Bridge {
                    denoiser: &oracle,
                    schedule: &sched,
                    stats: &stats,
                    nfe,
                },
                &codes.layer(1),
                &rvq,
                &mut rng,
            )
            .unwrap();
            assert_eq!(out.nfe, nfe);
            let err = (&out.embedding - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "nfe {nfe}: {err}");
        }
    }

    #[test]
    fn baseline_and_one_step_accounting() {
        let (rvq, z) = toy(4);
        let codes = quantize_values(&rvq, &z).unwrap().codes;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = resynthesize_codes(Strategy::Baseline, &codes.layer(1), &rvq, &mut rng).unwrap();
        assert_eq!(base.nfe, 0);
        assert_eq!(base.embedding, dequantize_values(&rvq, &codes, 1).unwrap());

        struct Identity;
        impl Regressor for Identity {
            fn regress(&self, x1: &Array2<f64>) -> Result<Array2<f64>> {
                Ok(x1.clone())
            }
        }
        let one = resynthesize_codes(Strategy::OneStep { regressor: &Identity }, &codes.layer(1), &rvq, &mut rng).unwrap();
        assert_eq!(one.nfe, 1);
        assert_eq!(one.embedding, base.embedding);
        assert!(resynthesize_codes(Strategy::Baseline, &[8], &rvq, &mut rng).is_err());
    }
}
