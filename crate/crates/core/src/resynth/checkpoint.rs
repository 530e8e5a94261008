//! Versioned checkpoint files.
//!
//! Layout (little-endian): magic `RSCK`, `u32` version, `u32` header length,
//! JSON header, `u64` parameter count, parameters as f32, `u16` optimizer
//! flag, then (if set) `u64` step count and the two moment vectors as f32.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BridgeModel, CoarseToFineModel, DecodeMode, FeatureStats, Method, NetConfig, OneStepModel, Strategy};
use crate::binio::{read_file, Reader, Writer};
use crate::bridge::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nnet::{AdamState, LayoutEntry, ParameterSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: Method,
    pub net: NetConfig,
    pub dim: usize,
    /// RVQ layers and codebook size the model predicts over (coarse-to-fine only).
    pub code_geometry: Option<(usize, usize)>,
    pub stats: FeatureStats,
    pub schedule: Option<ScheduleConfig>,
    pub layout: Vec<LayoutEntry>,
    /// Free-form provenance such as codec and config hashes.
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut w = Writer::default();
        w.magic(MAGIC)
            .u32(CHECKPOINT_VERSION)
            .u32(header.len() as u32)
            .bytes(&header)
            .u64(self.params.len() as u64)
            .f32s(self.params.iter().copied());
        match &self.optimizer {
            Some(opt) => {
                w.u16(1)
                    .u64(opt.step)
                    .f32s(opt.m.iter().copied())
                    .f32s(opt.v.iter().copied());
            }
            None => {
                w.u16(0);
            }
        }
        Ok(w.buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.corrupt(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.bytes(len)?)?;
        let n = r.u64()? as usize;
        let params = r.f32s(n)?;
        let optimizer = match r.u16()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.f32s(n)?;
                let v = r.f32s(n)?;
                Some(AdamState { m, v, step })
            }
            other => return Err(r.corrupt(format!("bad optimizer flag {other}"))),
        };
        r.finish()?;
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.header.tags.get(key).map(String::as_str)
    }
}

/// A trained model of any of the three strategies.
#[derive(Debug, Clone, PartialEq)]
pub enum ResynthModel {
    CoarseToFine(CoarseToFineModel),
    OneStep(OneStepModel),
    Bridge(BridgeModel),
}

impl ResynthModel {
    pub fn method(&self) -> Method {
        match self {
            ResynthModel::CoarseToFine(_) => Method::C2f,
            ResynthModel::OneStep(_) => Method::Onestep,
            ResynthModel::Bridge(_) => Method::Bridge,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            ResynthModel::CoarseToFine(m) => m.params(),
            ResynthModel::OneStep(m) => m.params(),
            ResynthModel::Bridge(m) => m.params(),
        }
    }

    /// Inference strategy for this model. `nfe` only matters for the bridge.
    pub fn strategy(&self, nfe: usize, mode: DecodeMode) -> Strategy<'_> {
        match self {
            ResynthModel::CoarseToFine(m) => Strategy::CoarseToFine { predictor: m, mode },
            ResynthModel::OneStep(m) => Strategy::OneStep { regressor: m },
            ResynthModel::Bridge(m) => Strategy::Bridge {
                denoiser: m,
                schedule: m.schedule(),
                stats: m.stats(),
                nfe,
            },
        }
    }

    pub fn to_checkpoint(&self, tags: BTreeMap<String, String>, optimizer: Option<AdamState>) -> Checkpoint {
        let (net, stats, dim, code_geometry, schedule) = match self {
            ResynthModel::CoarseToFine(m) => (
                m.net().clone(),
                m.stats().clone(),
                m.dim(),
                Some((super::CodePredictor::num_layers(m), m.codebook_size())),
                None,
            ),
            ResynthModel::OneStep(m) => (m.net().clone(), m.stats().clone(), m.dim(), None, None),
            ResynthModel::Bridge(m) => (
                m.net().clone(),
                m.stats().clone(),
                m.dim(),
                None,
                Some(m.schedule_config()),
            ),
        };
        let params = self.params();
        Checkpoint {
            header: CheckpointHeader {
                method: self.method(),
                net,
                dim,
                code_geometry,
                stats,
                schedule,
                layout: params.layout().to_vec(),
                tags,
            },
            params: params.values().to_vec(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        Error::check_dim(h.dim, h.stats.dim())?;
        let params = ParameterSet::from_parts(ckpt.params.clone(), h.layout.clone())?;
        match h.method {
            Method::C2f => {
                let (n, v) = h
                    .code_geometry
                    .ok_or_else(|| Error::invalid("coarse-to-fine checkpoint lacks code geometry"))?;
                Ok(ResynthModel::CoarseToFine(CoarseToFineModel::from_parts(
                    h.net.clone(),
                    h.stats.clone(),
                    n,
                    v,
                    params,
                )?))
            }
            Method::Onestep => Ok(ResynthModel::OneStep(OneStepModel::from_parts(
                h.net.clone(),
                h.stats.clone(),
                params,
            )?)),
            Method::Bridge => {
                let schedule = h
                    .schedule
                    .ok_or_else(|| Error::invalid("bridge checkpoint lacks a schedule"))?;
                Ok(ResynthModel::Bridge(BridgeModel::from_parts(
                    h.net.clone(),
                    h.stats.clone(),
                    schedule,
                    params,
                )?))
            }
            Method::Baseline => Err(Error::invalid("the baseline has no checkpoint")),
        }
    }
}
