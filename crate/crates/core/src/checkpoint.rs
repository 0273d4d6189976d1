//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RFLATCK\0"
//! version      u32
//! header_len   u32
//! header       JSON, header_len bytes
//! payload      f64 values: params, then average, then momentum, then metrics
//! checksum     32 bytes, SHA-256 of everything above
//! ```
//!
//! The header carries the network spec, its fingerprint, and a layer table
//! (layer index, role, shape) for each parameter block, so the payload can be
//! read without this library.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Direction, NetworkSpec, ParamEntry, ParamVector, Role};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::training::{Checkpoint, MetricsRow};

pub const MAGIC: &[u8; 8] = b"RFLATCK\0";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    layer: usize,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    spec_fingerprint: String,
    spec: NetworkSpec,
    epoch: usize,
    layers: Vec<LayerRecord>,
    has_average: bool,
    has_momentum: bool,
    rng: Option<RngState>,
    metrics_epoch: Option<usize>,
}

const METRIC_VALUES: usize = 9;

fn metric_values(m: &MetricsRow) -> [f64; METRIC_VALUES] {
    [m.lr, m.train_ce, m.train_rce, m.test_ce, m.test_rce, m.train_err, m.train_rerr, m.test_err, m.test_rerr]
}

fn metrics_from(epoch: usize, v: &[f64]) -> MetricsRow {
    MetricsRow {
        epoch,
        lr: v[0],
        train_ce: v[1],
        train_rce: v[2],
        test_ce: v[3],
        test_rce: v[4],
        train_err: v[5],
        train_rerr: v[6],
        test_err: v[7],
        test_rerr: v[8],
    }
}

fn push_values(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    if let Some(avg) = &ck.average {
        if !avg.same_layout(&ck.params) {
            return Err(Error::Partition("weight average layout differs from parameters".into()));
        }
    }
    if let Some(m) = &ck.momentum {
        ck.params.check_layout(m)?;
    }
    let header = Header {
        version: VERSION,
        spec_fingerprint: ck.spec.fingerprint(),
        spec: ck.spec.clone(),
        epoch: ck.epoch,
        layers: ck
            .params
            .entries()
            .iter()
            .map(|e| LayerRecord { layer: e.layer, role: e.role, shape: e.value.shape().to_vec() })
            .collect(),
        has_average: ck.average.is_some(),
        has_momentum: ck.momentum.is_some(),
        rng: ck.rng.clone(),
        metrics_epoch: ck.metrics.map(|m| m.epoch),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ck.params.num_values() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_values(&mut out, ck.params.flat());
    if let Some(avg) = &ck.average {
        push_values(&mut out, avg.flat());
    }
    if let Some(m) = &ck.momentum {
        push_values(&mut out, m.flat());
    }
    if let Some(m) = &ck.metrics {
        push_values(&mut out, metric_values(m));
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = LittleEndian::read_u32(&bytes[8..12]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    if bytes.len() < 16 + CHECKSUM_LEN {
        return Err(bad("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let header_len = LittleEndian::read_u32(&body[12..16]) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    if header.spec.fingerprint() != header.spec_fingerprint {
        return Err(bad("spec fingerprint does not match the stored spec"));
    }
    let payload = &body[header_end..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut values = payload.chunks_exact(8).map(LittleEndian::read_f64);
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad("payload shorter than the layer table"));
        }
        Tensor::new(shape.to_vec(), data)
    };
    let read_params = |take: &mut dyn FnMut(&[usize]) -> Result<Tensor>| -> Result<ParamVector> {
        let entries = header
            .layers
            .iter()
            .map(|l| Ok(ParamEntry { layer: l.layer, role: l.role, value: take(&l.shape)? }))
            .collect::<Result<_>>()?;
        Ok(ParamVector::new(entries))
    };
    let params = read_params(&mut take)?;
    let average = if header.has_average { Some(read_params(&mut take)?) } else { None };
    let momentum = if header.has_momentum {
        Some(Direction::new(header.layers.iter().map(|l| take(&l.shape)).collect::<Result<_>>()?))
    } else {
        None
    };
    let metrics = match header.metrics_epoch {
        Some(epoch) => Some(metrics_from(epoch, take(&[METRIC_VALUES])?.data())),
        None => None,
    };
    if values.next().is_some() {
        return Err(bad("trailing payload values"));
    }
    Ok(Checkpoint { epoch: header.epoch, spec: header.spec, params, average, momentum, rng: header.rng, metrics })
}

/// Writes to a temporary file beside `path` and renames it into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?, path)
}
