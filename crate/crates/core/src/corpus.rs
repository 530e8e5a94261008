//! Synthetic harmonic-plus-noise corpus and mono 16-bit PCM WAV I/O.
//!
//! Every utterance is keyed by `(seed, index)` through its own ChaCha stream, so
//! utterances can be generated independently and in any order.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest value representable by 16-bit PCM after scaling by 1/32768.
pub const PCM_MAX: f64 = 1.0 - 1.0 / 32768.0;

const PEAK_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// First `n` samples, or an error if the waveform is shorter.
    pub fn truncated(&self, n: usize) -> Result<Waveform> {
        if n == 0 || n > self.samples.len() {
            return Err(Error::OutOfRange {
                index: n,
                limit: self.samples.len(),
            });
        }
        Waveform::new(self.samples[..n].to_vec(), self.sample_rate_hz)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    pub sample_rate_hz: u32,
    pub duration_s_min: f64,
    pub duration_s_max: f64,
    pub f0_hz_min: f64,
    pub f0_hz_max: f64,
    pub num_harmonics: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 360,
            sample_rate_hz: 8000,
            duration_s_min: 1.0,
            duration_s_max: 3.0,
            // the top harmonic lands between 3.0 and 3.9 kHz, so every band up
            // to Nyquist carries voiced energy
            f0_hz_min: 200.0,
            f0_hz_max: 260.0,
            num_harmonics: 15,
            noise_level: 0.005,
            seed: 20240601,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 {
            return Err(Error::invalid("num_utterances must be positive"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("sample_rate_hz must be positive"));
        }
        let positive = [
            ("duration_s_min", self.duration_s_min),
            ("duration_s_max", self.duration_s_max),
            ("f0_hz_min", self.f0_hz_min),
            ("f0_hz_max", self.f0_hz_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.duration_s_min > self.duration_s_max {
            return Err(Error::invalid("duration_s_min exceeds duration_s_max"));
        }
        if self.f0_hz_min > self.f0_hz_max {
            return Err(Error::invalid("f0_hz_min exceeds f0_hz_max"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::invalid("noise_level must be non-negative"));
        }
        let top = self.num_harmonics as f64 * self.f0_hz_max;
        if top >= self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "highest harmonic {top} Hz is not below Nyquist ({} Hz)",
                self.sample_rate_hz as f64 / 2.0
            )));
        }
        Ok(())
    }
}

/// Per-utterance parameters drawn by [`synth_utterance`], recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceInfo {
    pub index: usize,
    pub duration_s: f64,
    pub f0_hz: f64,
}

pub fn synth_utterance(spec: &CorpusSpec, index: usize) -> Result<Waveform> {
    synth_utterance_with_info(spec, index).map(|(w, _)| w)
}

pub fn synth_utterance_with_info(
    spec: &CorpusSpec,
    index: usize,
) -> Result<(Waveform, UtteranceInfo)> {
    spec.validate()?;
    if index >= spec.num_utterances {
        return Err(Error::OutOfRange {
            index,
            limit: spec.num_utterances,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let sr = spec.sample_rate_hz as f64;
    let duration = uniform(&mut rng, spec.duration_s_min, spec.duration_s_max);
    let n = ((duration * sr).round() as usize).max(1);
    let f0_base = uniform(&mut rng, spec.f0_hz_min, spec.f0_hz_max);

    // Slow pitch drift and a syllable-rate loudness envelope.
    let vib_rate = uniform(&mut rng, 0.5, 3.0);
    let vib_depth = 0.06;
    let vib_phase = uniform(&mut rng, 0.0, 2.0 * PI);
    let syl_rate = uniform(&mut rng, 2.5, 5.0);
    let syl_phase = uniform(&mut rng, 0.0, PI);

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = (f0_base * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin()))
            .clamp(spec.f0_hz_min, spec.f0_hz_max);
        let env = {
            let s = (PI * syl_rate * t + syl_phase).sin();
            0.05 + 0.95 * s * s
        };
        // a pulse-train-like source: partials in phase with a 1/h rolloff
        let acc: f64 = (1..=spec.num_harmonics)
            .map(|h| (h as f64 * phase).sin() / h as f64)
            .sum();
        let noise: f64 = rng.sample(StandardNormal);
        samples.push(env * acc + spec.noise_level * noise);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
    }

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = PEAK_LEVEL / peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }

    let info = UtteranceInfo {
        index,
        duration_s: n as f64 / sr,
        f0_hz: f0_base,
    };
    Ok((Waveform::new(samples, spec.sample_rate_hz)?, info))
}

/// All utterances in index order, generated in parallel.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<(Waveform, UtteranceInfo)>> {
    spec.validate()?;
    (0..spec.num_utterances)
        .into_par_iter()
        .map(|i| synth_utterance_with_info(spec, i))
        .collect()
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels, only mono is supported",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit, only 16-bit PCM is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("data chunk: {e}"),
        })?;
    if samples.len() != expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("data chunk truncated: {} of {expected} samples", samples.len()),
        });
    }
    Waveform::new(samples, spec.sample_rate)
}

/// PCM value written for a sample: clamp to `[-1, PCM_MAX]`, scale by 32768,
/// round half away from zero.
pub fn pcm16(sample: f64) -> i16 {
    (sample.clamp(-1.0, PCM_MAX) * 32768.0).round() as i16
}

pub fn write_wav(waveform: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &waveform.samples {
        writer.write_sample(pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn crop_random(waveform: &Waveform, length_samples: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if length_samples == 0 {
        return Err(Error::invalid("crop length must be positive"));
    }
    if length_samples > waveform.len() {
        return Err(Error::OutOfRange {
            index: length_samples,
            limit: waveform.len(),
        });
    }
    let start = rng.random_range(0..=waveform.len() - length_samples);
    Waveform::new(
        waveform.samples[start..start + length_samples].to_vec(),
        waveform.sample_rate_hz,
    )
}

/// One line of the corpus manifest (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub duration_s: f64,
    pub f0_hz: f64,
    pub path: PathBuf,
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone_spec() -> CorpusSpec {
        CorpusSpec {
            num_utterances: 2,
            sample_rate_hz: 8000,
            duration_s_min: 0.5,
            duration_s_max: 0.5,
            f0_hz_min: 200.0,
            f0_hz_max: 200.0,
            num_harmonics: 1,
            noise_level: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn silent_spec_gives_zeros() {
        let spec = CorpusSpec {
            num_harmonics: 0,
            noise_level: 0.0,
            ..tone_spec()
        };
        let w = synth_utterance(&spec, 1).unwrap();
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn deterministic_per_index() {
        let spec = CorpusSpec::default();
        let a = synth_utterance(&spec, 5).unwrap();
        let b = synth_utterance(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_utterance(&spec, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn peak_normalized_and_in_duration_bounds() {
        let spec = CorpusSpec::default();
        for i in 0..4 {
            let w = synth_utterance(&spec, i).unwrap();
            let peak = w.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
            assert!((peak - 0.9).abs() < 1e-12);
            assert!(w.duration_s() >= spec.duration_s_min - 1e-3);
            assert!(w.duration_s() <= spec.duration_s_max + 1e-3);
        }
    }

    #[test]
    fn tone_peaks_at_fundamental() {
        let w = synth_utterance(&tone_spec(), 0).unwrap();
        let x = w.samples();
        let n = x.len();
        // direct DFT magnitude
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            (re * re + im * im).sqrt()
        };
        let best = (0..=n / 2)
            .map(|k| (k, mag(k)))
            .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b })
            .0;
        let bin_hz = 8000.0 / n as f64;
        assert!(
            (best as f64 * bin_hz - 200.0).abs() <= bin_hz / 2.0,
            "peak at bin {best} ({} Hz)",
            best as f64 * bin_hz
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = CorpusSpec::default();
        s.num_harmonics = 20;
        assert!(s.validate().is_err());
        let mut s = CorpusSpec::default();
        s.duration_s_min = 4.0;
        assert!(s.validate().is_err());
        let spec = CorpusSpec::default();
        assert!(synth_utterance(&spec, spec.num_utterances).is_err());
    }

    #[test]
    fn pcm_rounding() {
        assert_eq!(pcm16(1.5), 32767);
        assert_eq!(pcm16(0.0), 0);
        assert_eq!(pcm16(-1.0), -32768);
        assert_eq!(pcm16(-3.0), -32768);
        // half away from zero
        assert_eq!(pcm16(0.5 / 32768.0), 1);
        assert_eq!(pcm16(-0.5 / 32768.0), -1);
    }

    #[test]
    fn crop_bounds() {
        let w = Waveform::new(vec![0.1, 0.2, 0.3], 8000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_random(&w, 3, &mut rng).unwrap(), w);
        assert!(crop_random(&w, 0, &mut rng).is_err());
        assert!(crop_random(&w, 4, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let w = Waveform::new(vec![0.0, 1.0 / 8.0, 2.0 / 8.0], 8000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let c = crop_random(&w, 1, &mut rng).unwrap();
            counts[(c.samples()[0] * 8.0).round() as usize] += 1;
        }
        let p = 1.0 / 3.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
    }
}
