//! The pipeline stages. Each reads its inputs from the run directory and
//! writes its outputs there; nothing depends on wall-clock time.
//!
//! ```text
//! <out_dir>/config.toml
//! <out_dir>/corpus/{utt_NNNN.wav, manifest.jsonl, corpus.json}
//! <out_dir>/codec/{rvq.bin, codec.json}
//! <out_dir>/models/{<method>.ckpt, <method>_loss.csv, <method>.json}
//! <out_dir>/resynth/<label>/{utt_NNNN.wav, metadata.json}
//! <out_dir>/report/{report.csv, layer_sweep.csv, report.json}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use resynth_core::bridge::NoiseSchedule;
use resynth_core::corpus::{read_manifest, read_wav, synth_corpus, write_manifest, write_wav, ManifestRecord, Waveform};
use resynth_core::metrics::{eval_suite, EvalInputs, EvalReport, MethodRun};
use resynth_core::resynth::{
    resynthesize, BridgeModel, Checkpoint, CoarseToFineModel, DecodeMode, LossRecord, Method, OneStepModel,
    PreparedUtterance, ResynthModel, Strategy, TrainingSet,
};
use resynth_core::rvq::{bitrate, train_rvq, RvqModel};
use resynth_core::sha256_hex;
use resynth_core::transform::FrameTransform;

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::UserError;

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

pub fn codec_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("codec")
}

pub fn models_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("models")
}

pub fn resynth_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("resynth")
}

pub fn report_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("report")
}

pub fn checkpoint_path(cfg: &RunConfig, method: Method) -> PathBuf {
    models_dir(cfg).join(format!("{method}.ckpt"))
}

fn utterance_name(index: usize) -> String {
    format!("utt_{index:04}.wav")
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UserError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UserError(format!("{}: {e}", path.display())).into())
}

/// Takes the directory lock and records the effective configuration.
pub fn open_run(cfg: &RunConfig) -> Result<DirLock> {
    let lock = DirLock::acquire(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    Ok(lock)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config_hash: String,
    pub num_train: usize,
    pub num_test: usize,
    pub manifest_sha256: String,
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<CorpusInfo> {
    let dir = corpus_dir(cfg);
    mkdir(&dir)?;
    let utterances = synth_corpus(&cfg.corpus)?;
    let mut records = Vec::with_capacity(utterances.len());
    for (wave, info) in &utterances {
        let name = utterance_name(info.index);
        write_wav(wave, &dir.join(&name))?;
        records.push(ManifestRecord {
            index: info.index,
            duration_s: info.duration_s,
            f0_hz: info.f0_hz,
            path: PathBuf::from(name),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    let info = CorpusInfo {
        config_hash: cfg.hash()?,
        num_train: cfg.num_train(),
        num_test: cfg.num_test,
        manifest_sha256: sha256_hex(&std::fs::read(&manifest)?),
    };
    write_json(&dir.join("corpus.json"), &info)?;
    Ok(info)
}

/// Training and held-out waveforms as stored on disk.
pub struct CorpusSplit {
    pub train: Vec<Waveform>,
    pub test: Vec<Waveform>,
    pub test_names: Vec<String>,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<CorpusSplit> {
    let dir = corpus_dir(cfg);
    let manifest = dir.join("manifest.jsonl");
    if !manifest.exists() {
        return Err(UserError(format!("no corpus at {}; run gen-corpus first", dir.display())).into());
    }
    let records = read_manifest(&manifest)?;
    if records.len() != cfg.corpus.num_utterances {
        return Err(UserError(format!(
            "corpus holds {} utterances but the config asks for {}",
            records.len(),
            cfg.corpus.num_utterances
        ))
        .into());
    }
    let mut waves = Vec::with_capacity(records.len());
    let mut names = Vec::with_capacity(records.len());
    for r in &records {
        let w = read_wav(&dir.join(&r.path))?;
        if w.sample_rate_hz() != cfg.corpus.sample_rate_hz {
            return Err(UserError(format!(
                "{} is at {} Hz, config expects {}",
                r.path.display(),
                w.sample_rate_hz(),
                cfg.corpus.sample_rate_hz
            ))
            .into());
        }
        waves.push(w);
        names.push(r.path.display().to_string());
    }
    let test = waves.split_off(cfg.num_train());
    let test_names = names.split_off(cfg.num_train());
    Ok(CorpusSplit {
        train: waves,
        test,
        test_names,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecInfo {
    pub config_hash: String,
    pub rvq_sha256: String,
    pub frame_rate_hz: f64,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub bitrate_bps: f64,
    pub train_frames: usize,
    /// Mean training residual norm after each layer.
    pub residual_norms: Vec<f64>,
}

pub fn train_codec(cfg: &RunConfig) -> Result<CodecInfo> {
    let split = load_corpus(cfg)?;
    let transform = FrameTransform::new(cfg.frame_config())?;
    let embeddings = split
        .train
        .iter()
        .map(|w| transform.encode(w))
        .collect::<resynth_core::Result<Vec<_>>>()?;
    let (rvq, log) = train_rvq(
        &embeddings,
        cfg.codec.num_layers,
        cfg.codec.codebook_size,
        cfg.codec.kmeans_iters,
        cfg.codec.seed,
    )?;
    let dir = codec_dir(cfg);
    mkdir(&dir)?;
    let bytes = rvq.to_bytes();
    write(&dir.join("rvq.bin"), &bytes)?;
    let frame_rate_hz = cfg.frame_config().frame_rate_hz();
    let info = CodecInfo {
        config_hash: cfg.hash()?,
        rvq_sha256: sha256_hex(&bytes),
        frame_rate_hz,
        num_layers: rvq.num_layers(),
        codebook_size: rvq.codebook_size(),
        bitrate_bps: bitrate(&rvq, frame_rate_hz),
        train_frames: embeddings.iter().map(|e| e.len()).sum(),
        residual_norms: log.residual_norms,
    };
    write_json(&dir.join("codec.json"), &info)?;
    Ok(info)
}

pub struct Codec {
    pub transform: FrameTransform,
    pub rvq: RvqModel,
    pub hash: String,
}

pub fn load_codec(cfg: &RunConfig) -> Result<Codec> {
    let path = codec_dir(cfg).join("rvq.bin");
    let bytes = std::fs::read(&path)
        .map_err(|e| UserError(format!("no codec at {} ({e}); run train-codec first", path.display())))?;
    let hash = sha256_hex(&bytes);
    let info: CodecInfo = read_json(&codec_dir(cfg).join("codec.json"))?;
    if info.rvq_sha256 != hash {
        return Err(UserError(format!("{} does not match codec.json; rerun train-codec", path.display())).into());
    }
    let rvq = RvqModel::load(&path)?;
    if rvq.num_layers() != cfg.codec.num_layers
        || rvq.codebook_size() != cfg.codec.codebook_size
        || rvq.dim() != cfg.codec.dim
    {
        return Err(UserError(format!(
            "codec at {} has geometry N={} V={} d={}, config asks for N={} V={} d={}",
            path.display(),
            rvq.num_layers(),
            rvq.codebook_size(),
            rvq.dim(),
            cfg.codec.num_layers,
            cfg.codec.codebook_size,
            cfg.codec.dim
        ))
        .into());
    }
    Ok(Codec {
        transform: FrameTransform::new(cfg.frame_config())?,
        rvq,
        hash,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub method: Method,
    pub config_hash: String,
    pub codec_hash: String,
    pub checkpoint_sha256: String,
    pub steps: u64,
    pub parameters: usize,
    pub final_loss: f64,
}

pub fn train(cfg: &RunConfig, method: Method) -> Result<ModelInfo> {
    let hyper = cfg.hyper(method)?;
    let codec = load_codec(cfg)?;
    let split = load_corpus(cfg)?;
    let utterances = split
        .train
        .iter()
        .map(|w| PreparedUtterance::from_waveform(w, &codec.transform, &codec.rvq))
        .collect::<resynth_core::Result<Vec<_>>>()?;
    let set = TrainingSet::new(utterances)?;
    let started = Instant::now();
    let (model, outcome) = match method {
        Method::C2f => {
            let (m, o) = CoarseToFineModel::train(&set, &codec.rvq, cfg.net.clone(), &hyper)?;
            (ResynthModel::CoarseToFine(m), o)
        }
        Method::Onestep => {
            let (m, o) = OneStepModel::train(&set, cfg.net.clone(), &hyper)?;
            (ResynthModel::OneStep(m), o)
        }
        Method::Bridge => {
            let (m, o) = BridgeModel::train(&set, cfg.net.clone(), cfg.schedule, &hyper)?;
            (ResynthModel::Bridge(m), o)
        }
        Method::Baseline => unreachable!("hyper() rejects the baseline"),
    };
    eprintln!(
        "trained {method}: {} steps in {:.1} s",
        hyper.steps,
        started.elapsed().as_secs_f64()
    );

    let mut tags = BTreeMap::new();
    tags.insert("config_hash".to_string(), cfg.hash()?);
    tags.insert("codec_hash".to_string(), codec.hash.clone());
    if method == Method::Bridge {
        tags.insert(
            "schedule_hash".to_string(),
            NoiseSchedule::from_config(&cfg.schedule)?.fingerprint(),
        );
    }
    let bytes = model.to_checkpoint(tags, Some(outcome.optimizer)).to_bytes()?;
    let dir = models_dir(cfg);
    mkdir(&dir)?;
    write(&checkpoint_path(cfg, method), &bytes)?;
    write(&dir.join(format!("{method}_loss.csv")), loss_csv(&outcome.losses))?;
    let info = ModelInfo {
        method,
        config_hash: cfg.hash()?,
        codec_hash: codec.hash,
        checkpoint_sha256: sha256_hex(&bytes),
        steps: hyper.steps,
        parameters: model.params().len(),
        final_loss: outcome.losses.last().map_or(f64::NAN, |r| r.loss),
    };
    write_json(&dir.join(format!("{method}.json")), &info)?;
    Ok(info)
}

pub fn loss_csv(losses: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in losses {
        out.push_str(&format!("{},{:.9e},{:.9e}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Loads a checkpoint, refusing one trained against another codec or schedule.
pub fn load_model(cfg: &RunConfig, method: Method, codec: &Codec) -> Result<(ResynthModel, String)> {
    let path = checkpoint_path(cfg, method);
    let bytes = std::fs::read(&path)
        .map_err(|e| UserError(format!("no {method} checkpoint at {} ({e}); run train first", path.display())))?;
    let ckpt = Checkpoint::from_bytes(&bytes, &path)?;
    if ckpt.header.method != method {
        return Err(UserError(format!("{} holds a {} model", path.display(), ckpt.header.method)).into());
    }
    if ckpt.tag("codec_hash") != Some(codec.hash.as_str()) {
        return Err(UserError(format!(
            "{} was trained against codec {}, current codec is {}; retrain it",
            path.display(),
            ckpt.tag("codec_hash").unwrap_or("<none>"),
            codec.hash
        ))
        .into());
    }
    if method == Method::Bridge {
        let expected = NoiseSchedule::from_config(&cfg.schedule)?.fingerprint();
        if ckpt.tag("schedule_hash") != Some(expected.as_str()) {
            return Err(UserError(format!(
                "{} was trained with a different noise schedule; retrain it",
                path.display()
            ))
            .into());
        }
    }
    Ok((ResynthModel::from_checkpoint(&ckpt)?, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResynthFile {
    pub input: String,
    pub output: String,
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResynthInfo {
    pub method: Method,
    pub nfe: usize,
    pub seed: u64,
    pub config_hash: String,
    pub codec_hash: String,
    pub checkpoint_sha256: Option<String>,
    pub files: Vec<ResynthFile>,
}

#[derive(Debug, Clone)]
pub struct ResynthRequest {
    pub method: Method,
    /// A WAV to resynthesize instead of the held-out split.
    pub input: Option<PathBuf>,
    /// Bridge step count; the other methods have fixed costs.
    pub nfe: Option<usize>,
    pub seed: u64,
}

impl ResynthRequest {
    pub fn label(&self) -> String {
        match (self.method, self.nfe) {
            (Method::Bridge, Some(n)) => format!("bridge_nfe{n}"),
            (m, _) => m.to_string(),
        }
    }
}

pub fn resynth(cfg: &RunConfig, req: &ResynthRequest) -> Result<ResynthInfo> {
    let codec = load_codec(cfg)?;
    let loaded = match req.method {
        Method::Baseline => None,
        m => Some(load_model(cfg, m, &codec)?),
    };
    let nfe = match req.method {
        Method::Bridge => req
            .nfe
            .ok_or_else(|| UserError("bridge resynthesis needs --nfe".into()))?,
        _ => 0,
    };
    if nfe == 0 && req.method == Method::Bridge {
        return Err(UserError("--nfe must be positive".into()).into());
    }
    let strategy = match &loaded {
        None => Strategy::Baseline,
        Some((model, _)) => model.strategy(nfe, cfg.eval.c2f_decode),
    };
    let (inputs, names) = match &req.input {
        Some(path) => {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input.wav".to_string());
            (vec![read_wav(path)?], vec![name])
        }
        None => {
            let split = load_corpus(cfg)?;
            (split.test, split.test_names)
        }
    };
    let dir = resynth_dir(cfg).join(req.label());
    mkdir(&dir)?;
    let mut files = Vec::with_capacity(inputs.len());
    for (i, (wave, name)) in inputs.iter().zip(&names).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(i as u64);
        let out = resynthesize(strategy, wave, &codec.transform, &codec.rvq, &mut rng)?;
        let out_name = Path::new(name)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("out_{i:04}.wav"));
        write_wav(&out.waveform, &dir.join(&out_name))?;
        files.push(ResynthFile {
            input: name.clone(),
            output: out_name,
            nfe: out.nfe,
        });
    }
    let info = ResynthInfo {
        method: req.method,
        nfe: files.first().map_or(0, |f| f.nfe),
        seed: req.seed,
        config_hash: cfg.hash()?,
        codec_hash: codec.hash,
        checkpoint_sha256: loaded.map(|(_, h)| h),
        files,
    };
    write_json(&dir.join("metadata.json"), &info)?;
    Ok(info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInfo {
    pub config_hash: String,
    pub codec_hash: String,
    pub checkpoints: BTreeMap<String, String>,
    pub c2f_decode: DecodeMode,
    pub report: EvalReport,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let codec = load_codec(cfg)?;
    let split = load_corpus(cfg)?;
    let mut models = Vec::new();
    let mut checkpoints = BTreeMap::new();
    for &m in &cfg.eval.methods {
        let (model, hash) = load_model(cfg, m, &codec)?;
        checkpoints.insert(m.to_string(), hash);
        models.push(model);
    }
    let mut runs = Vec::new();
    for model in &models {
        match model {
            ResynthModel::Bridge(_) => {
                for &nfe in &cfg.eval.nfe_list {
                    runs.push(MethodRun {
                        strategy: model.strategy(nfe, cfg.eval.c2f_decode),
                    });
                }
            }
            _ => runs.push(MethodRun {
                strategy: model.strategy(0, cfg.eval.c2f_decode),
            }),
        }
    }
    let report = eval_suite(&EvalInputs {
        references: &split.test,
        transform: &codec.transform,
        rvq: &codec.rvq,
        runs,
        seed: cfg.eval.seed,
    })?;
    let dir = report_dir(cfg);
    mkdir(&dir)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    write(&dir.join("layer_sweep.csv"), report.layer_sweep_csv())?;
    write_json(
        &dir.join("report.json"),
        &ReportInfo {
            config_hash: cfg.hash()?,
            codec_hash: codec.hash,
            checkpoints,
            c2f_decode: cfg.eval.c2f_decode,
            report: report.clone(),
        },
    )?;
    Ok(report)
}

pub fn schedule_csv(cfg: &RunConfig) -> Result<String> {
    Ok(NoiseSchedule::from_config(&cfg.schedule)?.to_csv())
}

/// Every stage in order: corpus, codec, each configured method, resynthesis
/// of the held-out split (the bridge once per configured NFE), evaluation.
pub fn run_all(cfg: &RunConfig, seed: u64) -> Result<EvalReport> {
    gen_corpus(cfg)?;
    train_codec(cfg)?;
    for &m in &cfg.eval.methods {
        train(cfg, m)?;
    }
    let mut requests = vec![ResynthRequest {
        method: Method::Baseline,
        input: None,
        nfe: None,
        seed,
    }];
    for &m in &cfg.eval.methods {
        if m == Method::Bridge {
            for &nfe in &cfg.eval.nfe_list {
                requests.push(ResynthRequest {
                    method: m,
                    input: None,
                    nfe: Some(nfe),
                    seed,
                });
            }
        } else {
            requests.push(ResynthRequest {
                method: m,
                input: None,
                nfe: None,
                seed,
            });
        }
    }
    for req in &requests {
        resynth(cfg, req)?;
    }
    eval(cfg)
}
