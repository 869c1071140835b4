//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "STEPBACK"
//! 8       4     u32 format version (currently 1)
//! 12      8     u64 header length H in bytes
//! 20      H     UTF-8 JSON header
//! 20+H    8·N   f64 tensor data, concatenated in header order
//! ```
//!
//! The header holds the model topology, training config, speaker table, STFT
//! settings, normalization statistics, step counters, optimizer step counts
//! and a tensor index of `{name, shape, offset}` (offset counted in f64s).
//! Tensor names are `param/<name>`, `adam/<slot>/m/<name>` and `adam/<slot>/v/<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use stepback_autodiff::Tensor;

use super::config::TrainingConfig;
use super::Counters;
use crate::dataset::SpeakerId;
use crate::error::{Error, Result};
use crate::features::{NormStats, StftConfig};
use crate::model::{Model, ModelState, ParamStore};
use crate::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"STEPBACK";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub config: TrainingConfig,
    pub speakers: Vec<SpeakerId>,
    pub stft: StftConfig,
    pub stats: NormStats,
    pub counters: Counters,
    pub optimizers: BTreeMap<String, Adam>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: Model,
    classifier_frozen: bool,
    config: TrainingConfig,
    speakers: Vec<SpeakerId>,
    stft: StftConfig,
    stats: NormStats,
    counters: Counters,
    optimizers: BTreeMap<String, OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn speaker(&self, code: &str) -> Result<&SpeakerId> {
        self.speakers
            .iter()
            .find(|s| s.code == code)
            .ok_or_else(|| Error::Lookup(format!("speaker {code} is not in the checkpoint")))
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.state.params.iter() {
            tensors.push((format!("param/{name}"), t));
        }
        for (slot, opt) in &self.optimizers {
            for (name, t) in &opt.m {
                tensors.push((format!("adam/{slot}/m/{name}"), t));
            }
            for (name, t) in &opt.v {
                tensors.push((format!("adam/{slot}/v/{name}"), t));
            }
        }
        let mut offset = 0u64;
        let index = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            model: self.state.model.clone(),
            classifier_frozen: self.state.classifier_frozen,
            config: self.config.clone(),
            speakers: self.speakers.clone(),
            stft: self.stft,
            stats: self.stats.clone(),
            counters: self.counters.clone(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(k, o)| {
                    (
                        k.clone(),
                        OptimizerHeader {
                            config: o.config,
                            t: o.t,
                        },
                    )
                })
                .collect(),
            tensors: index,
        };
        let header = serde_json::to_vec(&header)?;

        let tmp = path.with_extension("ckpt.tmp");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (_, t) in &tensors {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner()?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
                _ => Error::io(path, e),
            })?;
            Ok(buf)
        };
        if read(8)? != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&read(header_len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> =
            BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Format(format!("tensor {} is out of order", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            expected_offset += n as u64;
            let bytes = read(n * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            let parts: Vec<&str> = entry.name.splitn(4, '/').collect();
            match parts.as_slice() {
                ["param", name] => params.insert(*name, t),
                ["adam", slot, kind @ ("m" | "v"), name] => {
                    let (m, v) = moments.entry(slot.to_string()).or_default();
                    let target = if *kind == "m" { m } else { v };
                    target.insert(name.to_string(), t);
                }
                _ => return Err(Error::Format(format!("unexpected tensor {}", entry.name))),
            }
        }
        check_params(&header.model.param_shapes(), &params)?;

        let optimizers = header
            .optimizers
            .into_iter()
            .map(|(slot, h)| {
                let (m, v) = moments.remove(&slot).unwrap_or_default();
                (
                    slot,
                    Adam {
                        config: h.config,
                        t: h.t,
                        m,
                        v,
                    },
                )
            })
            .collect();
        Ok(Checkpoint {
            state: ModelState {
                model: header.model,
                params,
                classifier_frozen: header.classifier_frozen,
            },
            config: header.config,
            speakers: header.speakers,
            stft: header.stft,
            stats: header.stats,
            counters: header.counters,
            optimizers,
        })
    }
}

/// Same names and shapes as a freshly initialized model of the declared topology.
fn check_params(reference: &BTreeMap<String, Vec<usize>>, loaded: &ParamStore) -> Result<()> {
    if reference.len() != loaded.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameter tensors, topology needs {}",
            loaded.len(),
            reference.len()
        )));
    }
    for (name, r) in reference.iter() {
        let l = loaded
            .get(name)
            .map_err(|_| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        if l.shape() != r.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, expected {r:?}",
                l.shape()
            )));
        }
    }
    Ok(())
}
