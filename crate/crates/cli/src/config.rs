//! Run configuration: one TOML file with every key spelled out.
//!
//! Parsing never fills in defaults; `init-config` materializes them instead,
//! so a config file on disk is always a complete record of a run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use resynth_core::bridge::ScheduleConfig;
use resynth_core::corpus::CorpusSpec;
use resynth_core::resynth::{DecodeMode, Method, NetConfig, TrainHyper};
use resynth_core::transform::FrameConfig;

use crate::UserError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// The last `num_test` utterances form the held-out split.
    pub num_test: usize,
    pub corpus: CorpusSpec,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub reference: ReferenceGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Random crops per batch.
    pub batch_size: usize,
    pub crop_frames: usize,
    pub weight_decay: f64,
    pub log_every: u64,
    pub seed: u64,
    pub c2f: MethodTrain,
    pub onestep: MethodTrain,
    pub bridge: MethodTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodTrain {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Bridge step counts; every value becomes one report row.
    pub nfe_list: Vec<usize>,
    pub c2f_decode: DecodeMode,
    pub seed: u64,
}

/// Full-scale settings kept for comparison; nothing reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceGeometry {
    pub frame_rate_hz: f64,
    pub dim: usize,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub warmup_steps: u64,
    pub schedule_steps: usize,
    pub beta_peak: f64,
    pub peak_lr_c2f: f64,
    pub peak_lr_onestep: f64,
    pub peak_lr_bridge: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            num_test: 24,
            corpus: CorpusSpec::default(),
            codec: CodecConfig {
                frame_size: 64,
                hop: 64,
                dim: 64,
                num_layers: 8,
                codebook_size: 256,
                kmeans_iters: 25,
                seed: 7,
            },
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig {
                batch_size: 32,
                crop_frames: 16,
                weight_decay: 0.01,
                log_every: 100,
                seed: 1,
                c2f: MethodTrain {
                    steps: 5_000,
                    peak_lr: 1e-4,
                    warmup_steps: 500,
                },
                onestep: MethodTrain {
                    steps: 5_000,
                    peak_lr: 5e-4,
                    warmup_steps: 500,
                },
                bridge: MethodTrain {
                    steps: 5_000,
                    peak_lr: 5e-4,
                    warmup_steps: 500,
                },
            },
            eval: EvalConfig {
                methods: Method::TRAINABLE.to_vec(),
                nfe_list: vec![1, 4, 7, 16, 32],
                c2f_decode: DecodeMode::Greedy,
                seed: 3,
            },
            reference: ReferenceGeometry {
                frame_rate_hz: 75.0,
                dim: 128,
                num_layers: 8,
                codebook_size: 1024,
                warmup_steps: 32_000,
                schedule_steps: 1000,
                beta_peak: 0.3,
                peak_lr_c2f: 1e-4,
                peak_lr_onestep: 5e-4,
                peak_lr_bridge: 5e-4,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UserError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    /// Digest of everything except `out_dir`, so relocated reruns share it.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(resynth_core::sha256_hex(c.to_toml()?.as_bytes()))
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            frame_size: self.codec.frame_size,
            hop: self.codec.hop,
            dim: self.codec.dim,
            sample_rate_hz: self.corpus.sample_rate_hz,
        }
    }

    pub fn method_train(&self, method: Method) -> Result<&MethodTrain> {
        match method {
            Method::C2f => Ok(&self.train.c2f),
            Method::Onestep => Ok(&self.train.onestep),
            Method::Bridge => Ok(&self.train.bridge),
            Method::Baseline => Err(UserError("the baseline is not trained".into()).into()),
        }
    }

    pub fn hyper(&self, method: Method) -> Result<TrainHyper> {
        let m = self.method_train(method)?;
        Ok(TrainHyper {
            steps: m.steps,
            batch_size: self.train.batch_size,
            crop_frames: self.train.crop_frames,
            peak_lr: m.peak_lr,
            warmup_steps: m.warmup_steps,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            log_every: self.train.log_every,
        })
    }

    pub fn num_train(&self) -> usize {
        self.corpus.num_utterances - self.num_test
    }

    pub fn validate(&self) -> Result<()> {
        let user = |e: resynth_core::Error| UserError(e.to_string());
        self.corpus.validate().map_err(user)?;
        if self.num_test == 0 || self.num_test >= self.corpus.num_utterances {
            return Err(UserError(format!(
                "num_test must be in 1..{}, got {}",
                self.corpus.num_utterances, self.num_test
            ))
            .into());
        }
        self.frame_config().validate().map_err(user)?;
        if self.codec.num_layers < 2 || self.codec.codebook_size < 2 || self.codec.kmeans_iters == 0 {
            return Err(UserError("codec needs num_layers >= 2, codebook_size >= 2, kmeans_iters >= 1".into()).into());
        }
        resynth_core::bridge::NoiseSchedule::from_config(&self.schedule).map_err(user)?;
        self.net.validate().map_err(user)?;
        for m in Method::TRAINABLE {
            self.hyper(m)?.validate().map_err(user)?;
        }
        if self.eval.methods.contains(&Method::Baseline) {
            return Err(UserError("eval.methods lists trained methods; the baseline row is always reported".into()).into());
        }
        let mut seen = self.eval.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.eval.methods.len() {
            return Err(UserError("eval.methods has duplicates".into()).into());
        }
        if self.eval.nfe_list.is_empty() || self.eval.nfe_list.contains(&0) {
            return Err(UserError("eval.nfe_list must hold positive step counts".into()).into());
        }
        if let DecodeMode::Sample { temperature } = self.eval.c2f_decode {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(UserError("c2f sampling temperature must be positive".into()).into());
            }
        }
        Ok(())
    }
}
