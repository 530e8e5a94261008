//! Bridge denoiser `ε(x_t, t | x1)` trained on the paired-data objective.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::data::{window_rows, FeatureStats, TrainingSet};
use super::train::{chunked, rng_stream, run_training, TrainHyper, TrainOutcome, INIT_STREAM};
use super::NetConfig;
use crate::bridge::{sample_xt, Denoiser, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nnet::{Mlp, NetSpec, ParamBuilder, ParameterSet, TimeEmbedding};

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeNet {
    net: NetConfig,
    stats: FeatureStats,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
    time: TimeEmbedding,
    mlp: Mlp,
}

/// Denoiser in standardized units. The state's context window is the main
/// input, the `x1` window enters through the auxiliary first-layer
/// projection at every time, and the time embedding drives the adaptive
/// layer norms.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel {
    arch: BridgeNet,
    params: ParameterSet,
}

#[derive(Debug, Clone)]
pub(crate) struct BridgeBatch {
    pub inputs: Array2<f64>,
    pub aux: Array2<f64>,
    pub cond: Array2<f64>,
    pub targets: Array2<f64>,
}

impl BridgeNet {
    fn spec(net: &NetConfig, dim: usize) -> NetSpec {
        NetSpec {
            input_dim: net.window_width(dim),
            aux_dim: net.window_width(dim),
            hidden_dims: net.hidden_dims.clone(),
            output_dim: dim,
            cond_dim: net.time_dim,
            activation: net.activation,
            layer_norm: true,
        }
    }

    fn loss_grad(&self, params: &ParameterSet, batch: &BridgeBatch) -> Result<(f64, Vec<f64>)> {
        let rows = batch.inputs.nrows();
        let denom = (rows * batch.targets.ncols()) as f64;
        chunked(params.len(), rows, |r, grads| {
            let (y, trace) = self.mlp.forward_traced(
                params,
                batch.inputs.slice(s![r.clone(), ..]),
                Some(batch.aux.slice(s![r.clone(), ..])),
                Some(batch.cond.slice(s![r.clone(), ..])),
            )?;
            let diff = y - batch.targets.slice(s![r, ..]);
            let loss = diff.iter().map(|v| v * v).sum::<f64>() / denom;
            let d_out = diff * (2.0 / denom);
            self.mlp.backward(params, &trace, d_out.view(), grads)?;
            Ok(loss)
        })
    }

    /// Each crop gets its own grid index `k ∈ {1..T}`; `x_t` is drawn jointly
    /// over the crop and its context neighbours so overlapping windows agree.
    fn draw_batch(&self, set: &TrainingSet, hyper: &TrainHyper, rng: &mut impl Rng) -> Result<BridgeBatch> {
        let radius = self.net.context_radius;
        let crops = set.draw_crops(hyper.batch_size, hyper.crop_frames, rng);
        let rows: usize = crops.iter().map(|c| c.len).sum();
        let d = set.dim();
        let width = self.net.window_width(d);
        let mut batch = BridgeBatch {
            inputs: Array2::zeros((rows, width)),
            aux: Array2::zeros((rows, width)),
            cond: Array2::zeros((rows, self.time.dim())),
            targets: Array2::zeros((rows, d)),
        };
        let mut at = 0;
        for c in crops {
            let total = set.utterances[c.utterance].len();
            let ext = c.extended(radius, total);
            let x0 = set.z_std[c.utterance].slice(s![ext.clone(), ..]).to_owned();
            let x1 = set.x1_std[c.utterance].slice(s![ext.clone(), ..]).to_owned();
            let k = rng.random_range(1..=self.schedule.steps());
            let xt = sample_xt(&x0, &x1, k, &self.schedule, rng)?;
            let rows = at..at + c.len;
            batch
                .inputs
                .slice_mut(s![rows.clone(), ..])
                .assign(&window_rows(xt.view(), ext.start, total, c.start, c.len, radius));
            batch
                .aux
                .slice_mut(s![rows.clone(), ..])
                .assign(&window_rows(x1.view(), ext.start, total, c.start, c.len, radius));
            let emb = Array1::from(self.time.embed(self.schedule.time(k)));
            for mut row in batch.cond.slice_mut(s![rows.clone(), ..]).outer_iter_mut() {
                row.assign(&emb);
            }
            let inner = c.start - ext.start..c.start - ext.start + c.len;
            let sigma = self.schedule.sigma(k);
            let target = (&xt.slice(s![inner.clone(), ..]) - &x0.slice(s![inner, ..])) / sigma;
            batch.targets.slice_mut(s![rows, ..]).assign(&target);
            at += c.len;
        }
        Ok(batch)
    }
}

impl BridgeModel {
    pub fn new(net: NetConfig, stats: FeatureStats, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        net.validate()?;
        stats.validate()?;
        let sched = NoiseSchedule::from_config(&schedule)?;
        let time = TimeEmbedding::new(net.time_dim)?;
        let mut rng = rng_stream(seed, INIT_STREAM);
        let mut builder = ParamBuilder::new(&mut rng);
        let mlp = Mlp::build(BridgeNet::spec(&net, stats.dim()), &mut builder, "net")?;
        // ε ≡ 0 at the start: a one-step run then returns x1 unchanged
        let mut params = builder.finish();
        params.view_mut(mlp.output_slots().0).fill(0.0);
        Ok(Self {
            arch: BridgeNet {
                net,
                stats,
                schedule_config: schedule,
                schedule: sched,
                time,
                mlp,
            },
            params,
        })
    }

    pub fn from_parts(
        net: NetConfig,
        stats: FeatureStats,
        schedule: ScheduleConfig,
        params: ParameterSet,
    ) -> Result<Self> {
        let mut model = Self::new(net, stats, schedule, 0)?;
        if model.params.layout() != params.layout() {
            return Err(Error::invalid("parameter layout does not match the bridge network"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn train(
        set: &TrainingSet,
        net: NetConfig,
        schedule: ScheduleConfig,
        hyper: &TrainHyper,
    ) -> Result<(Self, TrainOutcome)> {
        let mut model = Self::new(net, set.stats.clone(), schedule, hyper.seed)?;
        let arch = &model.arch;
        let outcome = run_training(
            &mut model.params,
            hyper,
            |rng| arch.draw_batch(set, hyper, rng),
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

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.arch.schedule
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        self.arch.schedule_config
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

    /// Mean training objective over `draws` fresh batches.
    pub fn evaluate_loss(&self, set: &TrainingSet, hyper: &TrainHyper, draws: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..draws {
            let b = self.arch.draw_batch(set, hyper, rng)?;
            total += self.arch.loss_grad(&self.params, &b)?.0;
        }
        Ok(total / draws as f64)
    }
}

impl Denoiser for BridgeModel {
    fn predict(&self, x: &Array2<f64>, x1: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        Error::check_dim(self.dim(), x.ncols())?;
        Error::check_dim(x.nrows(), x1.nrows())?;
        let l = x.nrows();
        let r = self.arch.net.context_radius;
        let xw = window_rows(x.view(), 0, l, 0, l, r);
        let aw = window_rows(x1.view(), 0, l, 0, l, r);
        let t = self.arch.schedule.time(k);
        let emb = Array1::from(self.arch.time.embed(t));
        let cond = emb.broadcast((l, emb.len())).expect("row broadcast").to_owned();
        self.arch
            .mlp
            .forward(&self.params, xw.view(), Some(aw.view()), Some(cond.view()))
    }
}
