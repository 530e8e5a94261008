//! Orthonormal DCT-II frame analysis/synthesis.
//!
//! Stands in for a neural codec's encoder/decoder pair. Because the basis is
//! orthonormal and frames do not overlap, decoding an unquantized embedding
//! returns the input exactly (up to float rounding).

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::corpus::Waveform;
use crate::error::{Error, Result};

const EMBEDDING_MAGIC: &[u8; 4] = b"RSEM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub dim: usize,
    pub sample_rate_hz: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            hop: 64,
            dim: 64,
            sample_rate_hz: 8000,
        }
    }
}

impl FrameConfig {
    /// Geometry of the 6 kbps 24 kHz reference codec: 128-dim embeddings at 75 Hz.
    /// Kept for bitrate bookkeeping only.
    pub const REFERENCE: FrameConfig = FrameConfig {
        frame_size: 320,
        hop: 320,
        dim: 128,
        sample_rate_hz: 24000,
    };

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.hop == 0 || self.dim == 0 || self.sample_rate_hz == 0 {
            return Err(Error::invalid("frame config fields must be positive"));
        }
        if self.hop != self.frame_size || self.dim != self.frame_size {
            return Err(Error::invalid(format!(
                "only non-overlapping square transforms are supported (F={}, H={}, d={})",
                self.frame_size, self.hop, self.dim
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_size {
            0
        } else {
            (num_samples - self.frame_size) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    values: Array2<f64>,
    frame_config: FrameConfig,
}

impl EmbeddingSequence {
    pub fn new(values: Array2<f64>, frame_config: FrameConfig) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("embedding sequence needs at least one frame"));
        }
        Error::check_dim(frame_config.dim, values.ncols())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding values"));
        }
        Ok(Self {
            values,
            frame_config,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn frame_config(&self) -> FrameConfig {
        self.frame_config
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Header `(L, d, F, H, sample rate)` as little-endian u32 after the magic,
    /// then row-major little-endian f32 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.magic(EMBEDDING_MAGIC)
            .u32(self.len() as u32)
            .u32(self.dim() as u32)
            .u32(self.frame_config.frame_size as u32)
            .u32(self.frame_config.hop as u32)
            .u32(self.frame_config.sample_rate_hz)
            .f32s(self.values.iter().copied());
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        r.expect_magic(EMBEDDING_MAGIC)?;
        let l = r.u32()? as usize;
        let d = r.u32()? as usize;
        let cfg = FrameConfig {
            frame_size: r.u32()? as usize,
            hop: r.u32()? as usize,
            dim: d,
            sample_rate_hz: r.u32()?,
        };
        let values = r.f32s(l * d)?;
        r.finish()?;
        let values = Array2::from_shape_vec((l, d), values).map_err(|e| r.corrupt(e.to_string()))?;
        Self::new(values, cfg)
    }
}

/// Orthonormal DCT-II basis: row `k` is the k-th basis waveform of length `n`.
pub fn dct_basis(n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (PI * (i as f64 + 0.5) * k as f64 / nf).cos()
    })
}

/// Frame analysis/synthesis with a cached basis.
#[derive(Debug, Clone)]
pub struct FrameTransform {
    cfg: FrameConfig,
    basis: Array2<f64>,
}

impl FrameTransform {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            basis: dct_basis(cfg.frame_size),
            cfg,
        })
    }

    pub fn config(&self) -> FrameConfig {
        self.cfg
    }

    pub fn encode(&self, waveform: &Waveform) -> Result<EmbeddingSequence> {
        if waveform.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::SampleRateMismatch {
                expected: self.cfg.sample_rate_hz,
                actual: waveform.sample_rate_hz(),
            });
        }
        let f = self.cfg.frame_size;
        let l = self.cfg.num_frames(waveform.len());
        if l == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one frame ({f})",
                waveform.len()
            )));
        }
        let s = waveform.samples();
        let mut out = Array2::<f64>::zeros((l, self.cfg.dim));
        out.outer_iter_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(j, mut row)| {
                let frame = ArrayView1::from(&s[j * self.cfg.hop..j * self.cfg.hop + f]);
                row.assign(&self.basis.dot(&frame));
            });
        EmbeddingSequence::new(out, self.cfg)
    }

    pub fn decode(&self, embeddings: &EmbeddingSequence) -> Result<Waveform> {
        self.decode_values(embeddings.values())
    }

    pub fn decode_values(&self, values: &Array2<f64>) -> Result<Waveform> {
        Error::check_dim(self.cfg.dim, values.ncols())?;
        if values.nrows() == 0 {
            return Err(Error::invalid("nothing to decode"));
        }
        // frames = values * basis, since the basis is orthonormal its transpose is the inverse
        let frames = values.dot(&self.basis);
        let samples: Vec<f64> = frames.iter().copied().collect();
        Waveform::new(samples, self.cfg.sample_rate_hz)
    }
}

pub fn encode_frames(waveform: &Waveform, cfg: FrameConfig) -> Result<EmbeddingSequence> {
    FrameTransform::new(cfg)?.encode(waveform)
}

pub fn decode_frames(embeddings: &EmbeddingSequence, cfg: FrameConfig) -> Result<Waveform> {
    Error::check_dim(cfg.dim, embeddings.dim())?;
    FrameTransform::new(cfg)?.decode(embeddings)
}
