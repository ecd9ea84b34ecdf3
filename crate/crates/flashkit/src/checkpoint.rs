//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 8            | magic `FLKCKPT\0`                                    |
//! | 4            | format version (`u32`, currently 1)                  |
//! | 8            | header length `H` (`u64`)                            |
//! | `H`          | UTF-8 JSON [`Header`]                                |
//! | rest         | `f64` arrays: every parameter in header order, then  |
//! |              | every first moment, then every second moment         |
//!
//! The payload length must match the shapes in the header exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use flashkit_core::model::Model;
use flashkit_core::optim::AdamW;
use flashkit_core::tensor::Tensor;

use crate::config::Settings;

const MAGIC: &[u8; 8] = b"FLKCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Settings the model was built from.
    pub settings: Settings,
    /// Optimizer updates applied.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Restored training state.
pub struct Checkpoint {
    pub settings: Settings,
    pub model: Model,
    pub opt: AdamW,
}

pub fn encode(settings: &Settings, model: &Model, opt: &AdamW) -> Result<Vec<u8>> {
    let header = Header {
        settings: settings.clone(),
        step: opt.step,
        tensors: model
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [model.store.values(), &opt.m[..], &opt.v[..]] {
        for t in group {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    ensure!(bytes.len() >= n, "checkpoint truncated while reading {what}");
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let buf = &mut bytes;
    if take(buf, 8, "magic")? != MAGIC {
        bail!("not a flashkit checkpoint");
    }
    let version = u32::from_le_bytes(take(buf, 4, "version")?.try_into()?);
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let len = u64::from_le_bytes(take(buf, 8, "header length")?.try_into()?) as usize;
    let header: Header = serde_json::from_slice(take(buf, len, "header")?).context("parsing checkpoint header")?;

    let cfg = header.settings.train_config()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    ensure!(
        model.store.len() == header.tensors.len(),
        "checkpoint has {} tensors, model expects {}",
        header.tensors.len(),
        model.store.len()
    );
    for ((_, name, t), entry) in model.store.iter().zip(&header.tensors) {
        ensure!(
            name == entry.name && t.shape() == entry.shape.as_slice(),
            "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
            entry.name,
            entry.shape,
            t.shape()
        );
    }
    let read_group = |buf: &mut &[u8]| -> Result<Vec<Tensor>> {
        header
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = take(buf, 8 * n, &e.name)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Ok(Tensor::new(e.shape.clone(), data)?)
            })
            .collect()
    };
    let params = read_group(buf)?;
    let m = read_group(buf)?;
    let v = read_group(buf)?;
    ensure!(buf.is_empty(), "checkpoint has {} trailing bytes", buf.len());
    for (dst, src) in model.store.values_mut().iter_mut().zip(params) {
        *dst = src;
    }
    let mut opt = AdamW::new(cfg.optim, model.store.values());
    opt.m = m;
    opt.v = v;
    opt.step = header.step;
    Ok(Checkpoint {
        settings: header.settings,
        model,
        opt,
    })
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save(path: &Path, settings: &Settings, model: &Model, opt: &AdamW) -> Result<()> {
    let bytes = encode(settings, model, opt)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(&bytes).with_context(|| format!("writing {}", tmp.display()))?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("moving checkpoint into {}", path.display()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}
