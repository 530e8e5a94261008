use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{view_mut, Init, ParamBuilder, ParameterSet, Slot};
use crate::error::{Error, Result};

/// Positions fed to the sinusoids are `t * TIME_SCALE`, so the unit interval
/// spans as many "positions" as a 1000-step grid.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Fixed sinusoidal embedding of a scalar time `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!("time embedding width must be even and positive, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[sin(p·ω_0), …, sin(p·ω_{h-1}), cos(p·ω_0), …]` with geometrically
    /// spaced `ω_k = MAX_PERIOD^(-k/h)`.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let pos = t * TIME_SCALE;
        let mut out = vec![0.0; self.dim];
        for k in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
            out[k] = (pos * freq).sin();
            out[half + k] = (pos * freq).cos();
        }
        out
    }

    /// One embedding row per time.
    pub fn embed_rows(&self, times: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((times.len(), self.dim));
        for (mut row, &t) in out.outer_iter_mut().zip(times) {
            row.assign(&ndarray::Array1::from(self.embed(t)));
        }
        out
    }
}

/// Learnable table with one vector per coarse-to-fine stage `i ∈ {2..=N}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageEmbedding {
    slot: Slot,
    first_stage: usize,
}

impl StageEmbedding {
    /// Rows are drawn from `N(0, 1)` so the conditioning projections see
    /// distinct inputs per stage from the first step.
    pub fn build<R: rand::Rng>(
        builder: &mut ParamBuilder<'_, R>,
        name: &str,
        num_layers: usize,
        dim: usize,
    ) -> Result<Self> {
        if num_layers < 2 || dim == 0 {
            return Err(Error::invalid("stage embedding needs N >= 2 and a positive width"));
        }
        let slot = builder.add(name, num_layers - 1, dim, Init::Normal(1.0));
        Ok(Self { slot, first_stage: 2 })
    }

    pub fn dim(&self) -> usize {
        self.slot.cols
    }

    pub fn num_stages(&self) -> usize {
        self.slot.rows
    }

    fn row_index(&self, stage: usize) -> Result<usize> {
        if stage < self.first_stage || stage - self.first_stage >= self.slot.rows {
            return Err(Error::OutOfRange {
                index: stage,
                limit: self.slot.rows + self.first_stage,
            });
        }
        Ok(stage - self.first_stage)
    }

    pub fn lookup<'p>(&self, params: &'p ParameterSet, stage: usize) -> Result<ndarray::ArrayView1<'p, f64>> {
        let r = self.row_index(stage)?;
        Ok(params.view(self.slot).index_axis_move(ndarray::Axis(0), r))
    }

    pub fn accumulate_grad(&self, grads: &mut [f64], stage: usize, d: ndarray::ArrayView1<f64>) -> Result<()> {
        let r = self.row_index(stage)?;
        let mut g = view_mut(grads, self.slot);
        let mut row = g.row_mut(r);
        row += &d;
        Ok(())
    }
}
