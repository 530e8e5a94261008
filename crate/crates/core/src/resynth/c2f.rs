//! Coarse-to-fine code prediction: a shared trunk conditioned on a learnable
//! stage embedding, with one linear softmax head per predicted layer.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::data::{window_rows, FeatureStats, TrainingSet};
use super::train::{chunked, rng_stream, run_training, TrainHyper, TrainOutcome, INIT_STREAM};
use super::{CodePredictor, NetConfig};
use crate::error::{Error, Result};
use crate::nnet::{view, view_mut, Init, Mlp, NetSpec, ParamBuilder, ParameterSet, Slot, StageEmbedding};
use crate::rvq::RvqModel;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseToFineNet {
    net: NetConfig,
    stats: FeatureStats,
    num_layers: usize,
    codebook_size: usize,
    stage: StageEmbedding,
    trunk: Mlp,
    /// `(weight trunk_dim × V, bias 1 × V)` for stages `2..=N`.
    heads: Vec<(Slot, Slot)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseToFineModel {
    arch: CoarseToFineNet,
    params: ParameterSet,
}

#[derive(Debug, Clone)]
pub(crate) struct StageBatch {
    pub inputs: Array2<f64>,
    pub stages: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Sum of the code vectors of layers `1..upto` for frames `rows`; zero when `upto == 0`.
fn partial_sum(rvq: &RvqModel, codes: &ndarray::Array2<usize>, rows: std::ops::Range<usize>, upto: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), rvq.dim()));
    for (i, f) in rows.enumerate() {
        let mut row = out.row_mut(i);
        for layer in 1..=upto {
            row += &rvq.codebook(layer).code(codes[[f, layer - 1]]);
        }
    }
    out
}

impl CoarseToFineNet {
    fn head(&self, stage: usize) -> Result<(Slot, Slot)> {
        if stage < 2 || stage > self.num_layers {
            return Err(Error::OutOfRange {
                index: stage,
                limit: self.num_layers + 1,
            });
        }
        Ok(self.heads[stage - 2])
    }

    fn cond_rows(&self, params: &ParameterSet, stages: &[usize]) -> Result<Array2<f64>> {
        let mut cond = Array2::zeros((stages.len(), self.stage.dim()));
        for (mut row, &st) in cond.outer_iter_mut().zip(stages) {
            row.assign(&self.stage.lookup(params, st)?);
        }
        Ok(cond)
    }

    /// Mean cross-entropy of the stage heads on the true indices.
    fn loss_grad(&self, params: &ParameterSet, batch: &StageBatch) -> Result<(f64, Vec<f64>)> {
        let rows = batch.inputs.nrows();
        let denom = rows as f64;
        chunked(params.len(), rows, |r, grads| {
            let stages = &batch.stages[r.clone()];
            let targets = &batch.targets[r.clone()];
            let cond = self.cond_rows(params, stages)?;
            let (h, trace) = self
                .trunk
                .forward_traced(params, batch.inputs.slice(s![r, ..]), None, Some(cond.view()))?;
            let mut d_h = Array2::<f64>::zeros(h.raw_dim());
            let mut loss = 0.0;
            for stage in 2..=self.num_layers {
                let idx: Vec<usize> = (0..stages.len()).filter(|&i| stages[i] == stage).collect();
                if idx.is_empty() {
                    continue;
                }
                let (w, b) = self.head(stage)?;
                let hs = h.select(Axis(0), &idx);
                let mut logits = hs.dot(&params.view(w));
                logits += &params.view(b).row(0);
                for (j, mut row) in logits.outer_iter_mut().enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let z: f64 = row.sum();
                    let t = targets[idx[j]];
                    loss += (z.ln() - row[t].ln()) / denom;
                    row.mapv_inplace(|v| v / z / denom);
                    row[t] -= 1.0 / denom;
                }
                let d_logits = logits;
                ndarray::linalg::general_mat_mul(1.0, &hs.t(), &d_logits, 1.0, &mut view_mut(grads, w));
                let mut gb = view_mut(grads, b);
                let mut gb = gb.row_mut(0);
                for row in d_logits.outer_iter() {
                    gb += &row;
                }
                let dh_rows = d_logits.dot(&view(params.values(), w).t());
                for (j, &i) in idx.iter().enumerate() {
                    d_h.row_mut(i).assign(&dh_rows.row(j));
                }
            }
            let input_grads = self.trunk.backward(params, &trace, d_h.view(), grads)?;
            let d_cond = input_grads.cond.expect("trunk is conditioned");
            for (row, &st) in d_cond.outer_iter().zip(stages) {
                self.stage.accumulate_grad(grads, st, row)?;
            }
            Ok(loss)
        })
    }

    fn draw_batch(&self, set: &TrainingSet, rvq: &RvqModel, hyper: &TrainHyper, rng: &mut impl Rng) -> Result<StageBatch> {
        let radius = self.net.context_radius;
        let crops = set.draw_crops(hyper.batch_size, hyper.crop_frames, rng);
        let rows: usize = crops.iter().map(|c| c.len).sum();
        let mut batch = StageBatch {
            inputs: Array2::zeros((rows, self.net.window_width(set.dim()))),
            stages: Vec::with_capacity(rows),
            targets: Vec::with_capacity(rows),
        };
        let mut at = 0;
        for c in crops {
            let u = &set.utterances[c.utterance];
            let total = u.len();
            let stage = rng.random_range(2..=self.num_layers);
            let ext = c.extended(radius, total);
            let partial = set.stats.apply(&partial_sum(rvq, u.codes.indices(), ext.clone(), stage - 1))?;
            batch
                .inputs
                .slice_mut(s![at..at + c.len, ..])
                .assign(&window_rows(partial.view(), ext.start, total, c.start, c.len, radius));
            for f in c.start..c.start + c.len {
                batch.stages.push(stage);
                batch.targets.push(u.codes.indices()[[f, stage - 1]]);
            }
            at += c.len;
        }
        Ok(batch)
    }
}

impl CoarseToFineModel {
    pub fn new(net: NetConfig, stats: FeatureStats, num_layers: usize, codebook_size: usize, seed: u64) -> Result<Self> {
        net.validate()?;
        stats.validate()?;
        if num_layers < 2 || codebook_size < 2 {
            return Err(Error::invalid("coarse-to-fine needs N >= 2 and V >= 2"));
        }
        let mut rng = rng_stream(seed, INIT_STREAM);
        let mut builder = ParamBuilder::new(&mut rng);
        let stage = StageEmbedding::build(&mut builder, "stage", num_layers, net.stage_dim)?;
        let spec = NetSpec {
            input_dim: net.window_width(stats.dim()),
            aux_dim: 0,
            hidden_dims: net.hidden_dims.clone(),
            output_dim: net.trunk_dim,
            cond_dim: net.stage_dim,
            activation: net.activation,
            layer_norm: true,
        };
        let trunk = Mlp::build(spec, &mut builder, "trunk")?;
        let heads = (2..=num_layers)
            .map(|i| {
                (
                    builder.add(format!("head{i}.w"), net.trunk_dim, codebook_size, Init::Zeros),
                    builder.add(format!("head{i}.b"), 1, codebook_size, Init::Zeros),
                )
            })
            .collect();
        Ok(Self {
            arch: CoarseToFineNet {
                net,
                stats,
                num_layers,
                codebook_size,
                stage,
                trunk,
                heads,
            },
            params: builder.finish(),
        })
    }

    pub fn from_parts(
        net: NetConfig,
        stats: FeatureStats,
        num_layers: usize,
        codebook_size: usize,
        params: ParameterSet,
    ) -> Result<Self> {
        let mut model = Self::new(net, stats, num_layers, codebook_size, 0)?;
        if model.params.layout() != params.layout() {
            return Err(Error::invalid("parameter layout does not match the coarse-to-fine network"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn train(set: &TrainingSet, rvq: &RvqModel, net: NetConfig, hyper: &TrainHyper) -> Result<(Self, TrainOutcome)> {
        for u in &set.utterances {
            u.codes.validate_for(rvq)?;
        }
        Error::check_dim(rvq.dim(), set.dim())?;
        let mut model = Self::new(net, set.stats.clone(), rvq.num_layers(), rvq.codebook_size(), hyper.seed)?;
        let arch = &model.arch;
        let outcome = run_training(
            &mut model.params,
            hyper,
            |rng| arch.draw_batch(set, rvq, hyper, rng),
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

    pub fn codebook_size(&self) -> usize {
        self.arch.codebook_size
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

    /// Teacher-forced cross-entropy per stage `2..=N` over whole utterances.
    pub fn stage_cross_entropy(&self, set: &TrainingSet, rvq: &RvqModel) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for stage in 2..=self.arch.num_layers {
            let mut total = 0.0;
            let mut n = 0usize;
            for u in &set.utterances {
                let partial = partial_sum(rvq, u.codes.indices(), 0..u.len(), stage - 1);
                let logits = self.stage_logits(&partial, stage)?;
                for (f, row) in logits.outer_iter().enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - row[u.codes.indices()[[f, stage - 1]]];
                    n += 1;
                }
            }
            out.push(total / n as f64);
        }
        Ok(out)
    }
}

impl CodePredictor for CoarseToFineModel {
    fn num_layers(&self) -> usize {
        self.arch.num_layers
    }

    fn stage_logits(&self, partial: &Array2<f64>, stage: usize) -> Result<Array2<f64>> {
        let (w, b) = self.arch.head(stage)?;
        let x = self.arch.stats.apply(partial)?;
        let l = x.nrows();
        let win = window_rows(x.view(), 0, l, 0, l, self.arch.net.context_radius);
        let emb: Array1<f64> = self.arch.stage.lookup(&self.params, stage)?.to_owned();
        let cond = emb.broadcast((l, emb.len())).expect("row broadcast").to_owned();
        let h = self.arch.trunk.forward(&self.params, win.view(), None, Some(cond.view()))?;
        let mut logits = h.dot(&self.params.view(w));
        logits += &self.params.view(b).row(0);
        Ok(logits)
    }
}
