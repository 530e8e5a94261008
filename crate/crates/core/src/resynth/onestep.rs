//! One-step regression from the layer-1 code embedding straight to `z`.
//!
//! The network predicts the correction `z − x1` from a context window, and its
//! output layer starts at zero, so an untrained model decodes exactly what the
//! layer-1 baseline does.

use ndarray::{s, Array2};
use rand::Rng;

use super::data::{window_rows, FeatureStats, TrainingSet};
use super::train::{chunked, rng_stream, run_training, TrainHyper, TrainOutcome, INIT_STREAM};
use super::{NetConfig, Regressor};
use crate::error::{Error, Result};
use crate::nnet::{Mlp, NetSpec, ParamBuilder, ParameterSet};

/// Network layout plus the standardization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepNet {
    net: NetConfig,
    stats: FeatureStats,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepModel {
    arch: OneStepNet,
    params: ParameterSet,
}

impl OneStepNet {
    fn spec(net: &NetConfig, dim: usize) -> NetSpec {
        NetSpec {
            input_dim: net.window_width(dim),
            aux_dim: 0,
            hidden_dims: net.hidden_dims.clone(),
            output_dim: dim,
            cond_dim: 0,
            activation: net.activation,
            layer_norm: true,
        }
    }

    /// `MSE(x1 + f(window(x1)), z)` over the batch, all in standardized units;
    /// the batch targets already hold `z − x1`.
    fn loss_grad(&self, params: &ParameterSet, batch: &RegressionBatch) -> Result<(f64, Vec<f64>)> {
        let rows = batch.inputs.nrows();
        let denom = (rows * batch.targets.ncols()) as f64;
        chunked(params.len(), rows, |r, grads| {
            let x = batch.inputs.slice(s![r.clone(), ..]);
            let (y, trace) = self.mlp.forward_traced(params, x, None, None)?;
            let diff = y - batch.targets.slice(s![r, ..]);
            let loss = diff.iter().map(|v| v * v).sum::<f64>() / denom;
            let d_out = diff * (2.0 / denom);
            self.mlp.backward(params, &trace, d_out.view(), grads)?;
            Ok(loss)
        })
    }
}

/// Stacked context windows and the residuals `z − x1` they should predict.
#[derive(Debug, Clone)]
pub(crate) struct RegressionBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

fn draw_batch(set: &TrainingSet, radius: usize, hyper: &TrainHyper, rng: &mut impl Rng) -> RegressionBatch {
    let crops = set.draw_crops(hyper.batch_size, hyper.crop_frames, rng);
    let rows: usize = crops.iter().map(|c| c.len).sum();
    let d = set.dim();
    let mut inputs = Array2::zeros((rows, (2 * radius + 1) * d));
    let mut targets = Array2::zeros((rows, d));
    let mut at = 0;
    for c in crops {
        let total = set.utterances[c.utterance].len();
        let x1 = &set.x1_std[c.utterance];
        let w = window_rows(x1.view(), 0, total, c.start, c.len, radius);
        inputs.slice_mut(s![at..at + c.len, ..]).assign(&w);
        let rows = s![c.start..c.start + c.len, ..];
        targets
            .slice_mut(s![at..at + c.len, ..])
            .assign(&(&set.z_std[c.utterance].slice(rows) - &x1.slice(rows)));
        at += c.len;
    }
    RegressionBatch { inputs, targets }
}

impl OneStepModel {
    pub fn new(net: NetConfig, stats: FeatureStats, seed: u64) -> Result<Self> {
        net.validate()?;
        stats.validate()?;
        let mut rng = rng_stream(seed, INIT_STREAM);
        let mut builder = ParamBuilder::new(&mut rng);
        let mlp = Mlp::build(OneStepNet::spec(&net, stats.dim()), &mut builder, "net")?;
        let mut params = builder.finish();
        params.view_mut(mlp.output_slots().0).fill(0.0);
        Ok(Self {
            arch: OneStepNet { net, stats, mlp },
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking the layout.
    pub fn from_parts(net: NetConfig, stats: FeatureStats, params: ParameterSet) -> Result<Self> {
        let mut model = Self::new(net, stats, 0)?;
        if model.params.layout() != params.layout() {
            return Err(Error::invalid("parameter layout does not match the one-step network"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn train(set: &TrainingSet, net: NetConfig, hyper: &TrainHyper) -> Result<(Self, TrainOutcome)> {
        let mut model = Self::new(net, set.stats.clone(), hyper.seed)?;
        let radius = model.arch.net.context_radius;
        let arch = &model.arch;
        let outcome = run_training(
            &mut model.params,
            hyper,
            |rng| Ok(draw_batch(set, radius, hyper, rng)),
            |p, b| arch.loss_grad(p, b),
        )?;
        Ok((model, outcome))
    }

    pub fn net(&self) -> &NetConfig {
        &self.arch.net
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.arch.stats
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.arch.stats.dim()
    }

    /// Network map in standardized units: `L × d` in, `L × d` out.
    pub fn predict_standardized(&self, x1_std: &Array2<f64>) -> Result<Array2<f64>> {
        Error::check_dim(self.dim(), x1_std.ncols())?;
        let w = window_rows(x1_std.view(), 0, x1_std.nrows(), 0, x1_std.nrows(), self.arch.net.context_radius);
        Ok(self.arch.mlp.forward(&self.params, w.view(), None, None)? + x1_std)
    }

    /// Mean squared error in standardized units over whole utterances.
    pub fn evaluate_loss(&self, set: &TrainingSet) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x1, z) in set.x1_std.iter().zip(&set.z_std) {
            let y = self.predict_standardized(x1)?;
            sum += (&y - z).iter().map(|v| v * v).sum::<f64>();
            n += z.len();
        }
        Ok(sum / n as f64)
    }
}

impl Regressor for OneStepModel {
    fn regress(&self, x1: &Array2<f64>) -> Result<Array2<f64>> {
        let x = self.arch.stats.apply(x1)?;
        self.arch.stats.invert(&self.predict_standardized(&x)?)
    }
}
