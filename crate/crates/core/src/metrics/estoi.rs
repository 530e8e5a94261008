//! Extended short-time objective intelligibility, adapted to narrowband audio.
//!
//! Hann-windowed 256-sample frames at 50% overlap feed a 512-point FFT; bin
//! energies are pooled into one-third-octave bands, and sliding 30-frame
//! patches of band magnitudes are normalized per band (over time) and then per
//! frame (over bands) before correlating estimate against reference.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstoiConfig {
    pub frame_len: usize,
    pub fft_len: usize,
    pub num_bands: usize,
    pub min_center_hz: f64,
    pub segment_frames: usize,
}

impl Default for EstoiConfig {
    fn default() -> Self {
        Self {
            frame_len: 256,
            fft_len: 512,
            num_bands: 15,
            min_center_hz: 150.0,
            segment_frames: 30,
        }
    }
}

impl EstoiConfig {
    pub fn hop(&self) -> usize {
        self.frame_len / 2
    }

    /// Fewest samples that yield one full segment.
    pub fn min_samples(&self) -> usize {
        self.frame_len + (self.segment_frames - 1) * self.hop()
    }

    /// Band edges in Hz: centers `f_c·2^(k/3)`, edges at `f_c·2^((2k±1)/6)`,
    /// the top edge clipped at Nyquist.
    pub fn band_edges(&self, sample_rate_hz: u32) -> Vec<(f64, f64)> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        (0..self.num_bands)
            .map(|k| {
                let lo = self.min_center_hz * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
                let hi = self.min_center_hz * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
                (lo.min(nyquist), hi.min(nyquist))
            })
            .collect()
    }

    fn band_bins(&self, sample_rate_hz: u32) -> Result<Vec<std::ops::Range<usize>>> {
        let df = sample_rate_hz as f64 / self.fft_len as f64;
        let bins = self.fft_len / 2 + 1;
        let edges = self.band_edges(sample_rate_hz);
        let mut out = Vec::with_capacity(edges.len());
        for (k, (lo, hi)) in edges.into_iter().enumerate() {
            let a = ((lo / df).ceil() as usize).min(bins);
            let mut b = ((hi / df).ceil() as usize).min(bins);
            if k + 1 == self.num_bands && hi >= sample_rate_hz as f64 / 2.0 {
                b = bins;
            }
            if a >= b {
                return Err(Error::invalid(format!(
                    "band {k} ({lo:.1}-{hi:.1} Hz) holds no FFT bin at {sample_rate_hz} Hz"
                )));
            }
            out.push(a..b);
        }
        Ok(out)
    }
}

/// ESTOI score in `[-1, 1]` with the default configuration.
pub fn estoi(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    estoi_with(estimate, reference, &EstoiConfig::default())
}

pub fn estoi_with(estimate: &Waveform, reference: &Waveform, cfg: &EstoiConfig) -> Result<f64> {
    if estimate.sample_rate_hz() != reference.sample_rate_hz() {
        return Err(Error::SampleRateMismatch {
            expected: reference.sample_rate_hz(),
            actual: estimate.sample_rate_hz(),
        });
    }
    Error::check_dim(reference.len(), estimate.len())?;
    if reference.len() < cfg.min_samples() {
        return Err(Error::invalid(format!(
            "ESTOI needs at least {} samples, got {}",
            cfg.min_samples(),
            reference.len()
        )));
    }
    let bands = cfg.band_bins(reference.sample_rate_hz())?;
    let x = band_spectrogram(reference.samples(), cfg, &bands);
    let y = band_spectrogram(estimate.samples(), cfg, &bands);
    let frames = x.len();
    let n = cfg.segment_frames;
    let mut total = 0.0;
    let mut segments = 0usize;
    for start in 0..=frames - n {
        if let Some(score) = segment_score(&x[start..start + n], &y[start..start + n]) {
            total += score;
            segments += 1;
        }
    }
    if segments == 0 {
        return Ok(0.0);
    }
    Ok(total / segments as f64)
}

fn hann(n: usize) -> Vec<f64> {
    // interior of an (n+2)-point window, so no tap is exactly zero
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Band magnitudes per frame: `frames × bands`.
fn band_spectrogram(samples: &[f64], cfg: &EstoiConfig, bands: &[std::ops::Range<usize>]) -> Vec<Vec<f64>> {
    let window = hann(cfg.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let hop = cfg.hop();
    let num_frames = (samples.len() - cfg.frame_len) / hop + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    let mut out = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let frame = &samples[f * hop..f * hop + cfg.frame_len];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for ((c, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            c.re = s * w;
        }
        fft.process(&mut buf);
        out.push(
            bands
                .iter()
                .map(|r| buf[r.clone()].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
                .collect(),
        );
    }
    out
}

/// Subtracts the mean and scales to unit norm; `None` for a constant vector.
fn normalize(v: &mut [f64]) -> Option<()> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || norm <= 1e-12 * scale {
        v.iter_mut().for_each(|x| *x = 0.0);
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}

/// Mean column correlation of one pair of `n × bands` patches, skipping
/// frames where either normalized column is degenerate.
fn segment_score(x: &[Vec<f64>], y: &[Vec<f64>]) -> Option<f64> {
    let bands = x[0].len();
    let n = x.len();
    let normalized = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
        // rows: per band across time
        let mut m: Vec<Vec<f64>> = (0..bands).map(|b| p.iter().map(|fr| fr[b]).collect()).collect();
        for row in &mut m {
            let _ = normalize(row);
        }
        // columns: per frame across bands
        (0..n)
            .map(|t| {
                let mut col: Vec<f64> = m.iter().map(|row| row[t]).collect();
                match normalize(&mut col) {
                    Some(()) => col,
                    None => Vec::new(),
                }
            })
            .collect()
    };
    let xn = normalized(x);
    let yn = normalized(y);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in xn.iter().zip(&yn) {
        if a.is_empty() || b.is_empty() {
            continue;
        }
        sum += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}
