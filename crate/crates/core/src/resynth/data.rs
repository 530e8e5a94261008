//! Training data: per-feature standardization, local context windows and
//! random crops over prepared utterances.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::snap_f32;
use crate::error::{Error, Result};
use crate::rvq::{dequantize_values, quantize_values, CodeSequence, RvqModel};
use crate::transform::{EmbeddingSequence, FrameTransform};
use crate::corpus::Waveform;

const STD_FLOOR: f64 = 1e-8;

/// Per-feature mean and standard deviation of `z` over the training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over every row of every matrix, rounded to f32
    /// so they survive a checkpoint round trip unchanged.
    pub fn fit<'a>(frames: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        let mut all = Vec::new();
        for m in frames {
            all.push(m);
        }
        for m in &all {
            let s = sum.get_or_insert_with(|| Array1::zeros(m.ncols()));
            Error::check_dim(s.len(), m.ncols())?;
            for row in m.outer_iter() {
                *s += &row;
            }
            count += m.nrows();
        }
        let Some(sum) = sum else {
            return Err(Error::invalid("no frames to fit statistics on"));
        };
        if count == 0 {
            return Err(Error::invalid("no frames to fit statistics on"));
        }
        let mean = sum / count as f64;
        for m in &all {
            let q = sq.get_or_insert_with(|| Array1::zeros(m.ncols()));
            for row in m.outer_iter() {
                let c = &row - &mean;
                *q += &(&c * &c);
            }
        }
        let var = sq.expect("non-empty") / count as f64;
        Ok(Self {
            mean: mean.iter().map(|&v| snap_f32(v)).collect(),
            std: var.iter().map(|&v| snap_f32(v.sqrt().max(STD_FLOOR))).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Error::check_dim(self.dim(), x.ncols())?;
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Error::check_dim(self.dim(), x.ncols())?;
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(self.mean.len(), self.std.len())?;
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("feature statistics must be finite with positive std"));
        }
        Ok(())
    }
}

/// Stacks each frame with its `radius` neighbours on either side, zero-padded
/// past the utterance edges: `L × (2·radius+1)·d`, oldest neighbour first.
pub fn context_window(x: ArrayView2<f64>, radius: usize) -> Array2<f64> {
    window_rows(x, 0, x.nrows(), 0, x.nrows(), radius)
}

/// Context windows for frames `start..start+len` of an utterance of
/// `total_len` frames, where `src` holds utterance rows `base..base+src.nrows()`.
pub(crate) fn window_rows(
    src: ArrayView2<f64>,
    base: usize,
    total_len: usize,
    start: usize,
    len: usize,
    radius: usize,
) -> Array2<f64> {
    let d = src.ncols();
    let width = 2 * radius + 1;
    let mut out = Array2::<f64>::zeros((len, width * d));
    for i in 0..len {
        let f = start + i;
        for o in 0..width {
            let Some(g) = (f + o).checked_sub(radius) else {
                continue;
            };
            if g >= total_len {
                continue;
            }
            out.slice_mut(s![i, o * d..(o + 1) * d]).assign(&src.row(g - base));
        }
    }
    out
}

/// Raw (unstandardized) material for one utterance.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    /// Pre-quantized embedding `z`.
    pub z: Array2<f64>,
    pub codes: CodeSequence,
    /// Layer-1 code vectors `x1`.
    pub x1: Array2<f64>,
}

impl PreparedUtterance {
    pub fn new(z: Array2<f64>, rvq: &RvqModel) -> Result<Self> {
        let codes = quantize_values(rvq, &z)?.codes;
        let x1 = dequantize_values(rvq, &codes, 1)?;
        Ok(Self { z, codes, x1 })
    }

    pub fn from_waveform(w: &Waveform, transform: &FrameTransform, rvq: &RvqModel) -> Result<Self> {
        Self::new(transform.encode(w)?.into_values(), rvq)
    }

    pub fn from_embedding(e: &EmbeddingSequence, rvq: &RvqModel) -> Result<Self> {
        Self::new(e.values().clone(), rvq)
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// A contiguous run of frames inside one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub utterance: usize,
    pub start: usize,
    pub len: usize,
}

impl Crop {
    /// Frame range covering the crop plus `radius` neighbours, clipped to the utterance.
    pub fn extended(&self, radius: usize, total_len: usize) -> std::ops::Range<usize> {
        self.start.saturating_sub(radius)..(self.start + self.len + radius).min(total_len)
    }
}

/// Training utterances with standardized copies of `z` and `x1`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub utterances: Vec<PreparedUtterance>,
    pub stats: FeatureStats,
    pub z_std: Vec<Array2<f64>>,
    pub x1_std: Vec<Array2<f64>>,
}

impl TrainingSet {
    pub fn new(utterances: Vec<PreparedUtterance>) -> Result<Self> {
        if utterances.is_empty() || utterances.iter().any(|u| u.is_empty()) {
            return Err(Error::invalid("training set is empty"));
        }
        let stats = FeatureStats::fit(utterances.iter().map(|u| u.z.view()))?;
        Self::with_stats(utterances, stats)
    }

    pub fn with_stats(utterances: Vec<PreparedUtterance>, stats: FeatureStats) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        stats.validate()?;
        let z_std = utterances.iter().map(|u| stats.apply(&u.z)).collect::<Result<_>>()?;
        let x1_std = utterances.iter().map(|u| stats.apply(&u.x1)).collect::<Result<_>>()?;
        Ok(Self {
            utterances,
            stats,
            z_std,
            x1_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.len()).sum()
    }

    /// `count` crops of up to `crop_frames` frames, each from a uniformly chosen
    /// utterance at a uniform offset.
    pub fn draw_crops(&self, count: usize, crop_frames: usize, rng: &mut impl Rng) -> Vec<Crop> {
        (0..count)
            .map(|_| {
                let utterance = rng.random_range(0..self.utterances.len());
                let total = self.utterances[utterance].len();
                let len = crop_frames.min(total);
                let start = rng.random_range(0..=total - len);
                Crop { utterance, start, len }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stats_round_trip() {
        let a = array![[1.0, 10.0], [3.0, 10.0]];
        let b = array![[5.0, 10.0]];
        let st = FeatureStats::fit([a.view(), b.view()]).unwrap();
        assert_eq!(st.mean, vec![3.0, 10.0]);
        assert!((st.std[0] - snap_f32((8.0f64 / 3.0).sqrt())).abs() < 1e-15);
        assert_eq!(st.std[1], snap_f32(STD_FLOOR));
        let back = st.invert(&st.apply(&a).unwrap()).unwrap();
        assert!((back - &a).iter().all(|v| v.abs() < 1e-9));
        assert!(FeatureStats::fit(Vec::<ArrayView2<f64>>::new()).is_err());
    }

    #[test]
    fn context_window_pads_edges() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let w = context_window(x.view(), 1);
        assert_eq!(
            w,
            array![
                [0.0, 0.0, 1.0, 2.0, 3.0, 4.0],
                [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                [3.0, 4.0, 5.0, 6.0, 0.0, 0.0]
            ]
        );
        assert_eq!(context_window(x.view(), 0), x);
    }

    #[test]
    fn window_rows_matches_full_window() {
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let full = context_window(x.view(), 2);
        let crop = Crop { utterance: 0, start: 1, len: 4 };
        let ext = crop.extended(2, 10);
        assert_eq!(ext, 0..7);
        let part = window_rows(x.slice(s![ext.clone(), ..]), ext.start, 10, 1, 4, 2);
        assert_eq!(part, full.slice(s![1..5, ..]));
        let crop = Crop { utterance: 0, start: 7, len: 3 };
        let ext = crop.extended(2, 10);
        let part = window_rows(x.slice(s![ext.clone(), ..]), ext.start, 10, 7, 3, 2);
        assert_eq!(part, full.slice(s![7..10, ..]));
    }
}
