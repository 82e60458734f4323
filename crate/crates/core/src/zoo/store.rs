//! Zoo persistence.
//!
//! Manifest: JSON lines. The first line is the zoo header; every further
//! line is either a record header (scalar fields plus the relative weight
//! file path and its SHA-256) or a failed-run marker. Weights: one binary
//! file per record — magic "DPWZ", a version byte, a little-endian u32
//! layer count, then per layer the kernel rank, dims (little-endian u32),
//! kernel values and bias values as little-endian IEEE-754 f32. The bias
//! length equals the kernel's trailing dimension.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::Epsilon;
use crate::error::{Error, Result};
use crate::nn::{Layer, ModelParams};
use crate::tensor::Tensor;
use crate::zoo::{HyperParams, TrainedModelRecord, ZooHeader, ZooManifest};

const WEIGHTS_MAGIC: &[u8; 4] = b"DPWZ";
const WEIGHTS_VERSION: u8 = 1;

/// Scalar fields of one record as stored in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: String,
    pub hyperparams: HyperParams,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub epsilon: Epsilon,
    pub delta: f64,
    pub weights_path: String,
    pub weights_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub(crate) enum ManifestLine {
    Header(Box<ZooHeader>),
    Record(Box<RecordMeta>),
    Failed { record_id: String, reason: String },
}

pub(crate) fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

pub(crate) fn weights_rel_path(record_id: &str) -> String {
    format!("records/{record_id}.dpwz")
}

/// Serialize weights into DPWZ bytes.
fn weights_to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        let dims = layer.kernel.shape();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in layer.kernel.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.bias.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a DPWZ weight file, returning its SHA-256 hex digest.
pub fn save_weights(path: &Path, params: &ModelParams<f32>) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = weights_to_bytes(params);
    let digest = hex_digest(&bytes);
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(digest)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Read a DPWZ weight file. When `expect_sha256` is given, the file bytes
/// must hash to it.
pub fn load_weights(path: &Path, expect_sha256: Option<&str>) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingWeights(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    if let Some(expect) = expect_sha256 {
        let got = hex_digest(&bytes);
        if got != expect {
            return Err(Error::ChecksumMismatch(
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            ));
        }
    }
    let mut r = BufReader::new(&bytes[..]);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadWeightFile("truncated header".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::BadWeightFile(format!(
            "bad magic {magic:?}, expected {WEIGHTS_MAGIC:?}"
        )));
    }
    let version = r
        .read_u8()
        .map_err(|_| Error::BadWeightFile("missing version".into()))?;
    if version != WEIGHTS_VERSION {
        return Err(Error::BadWeightFile(format!(
            "unsupported version {version}"
        )));
    }
    let n_layers = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::BadWeightFile("missing layer count".into()))? as usize;
    if n_layers > 64 {
        return Err(Error::BadWeightFile(format!(
            "implausible layer count {n_layers}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::BadWeightFile(format!("layer {li}: missing rank")))?
            as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::BadWeightFile(format!(
                "layer {li}: implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|_| Error::BadWeightFile(format!("layer {li}: missing dims")))?
                    as usize,
            );
        }
        let kernel_len: usize = dims.iter().product();
        let bias_len = *dims.last().unwrap();
        let mut read_f32s = |n: usize, what: &str| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.read_f32::<LittleEndian>().map_err(|_| {
                    Error::BadWeightFile(format!("layer {li}: truncated {what}"))
                })?);
            }
            Ok(v)
        };
        let kernel = Tensor::new(dims.clone(), read_f32s(kernel_len, "kernel")?)?;
        let bias = Tensor::new(vec![bias_len], read_f32s(bias_len, "bias")?)?;
        layers.push(Layer { kernel, bias });
    }
    Ok(ModelParams { layers })
}

pub(crate) fn append_line(path: &Path, line: &ManifestLine) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut s = serde_json::to_string(line)?;
    s.push('\n');
    f.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<ManifestLine>> {
    let f = fs::File::open(path)?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptManifest(format!("line {}: {e}", i + 1)))?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// Load a zoo from its manifest, reading and checksum-verifying every
/// weight file.
pub fn load_zoo(manifest: &Path) -> Result<ZooManifest> {
    let dir = manifest
        .parent()
        .ok_or_else(|| Error::CorruptManifest("manifest has no parent directory".into()))?;
    let lines = read_lines(manifest)?;
    let mut iter = lines.into_iter();
    let header = match iter.next() {
        Some(ManifestLine::Header(h)) => *h,
        _ => {
            return Err(Error::CorruptManifest(
                "first manifest line must be the zoo header".into(),
            ))
        }
    };
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for line in iter {
        match line {
            ManifestLine::Header(_) => {
                return Err(Error::CorruptManifest("duplicate header line".into()))
            }
            ManifestLine::Failed { record_id, reason } => failed.push((record_id, reason)),
            ManifestLine::Record(meta) => {
                let weights = load_weights(
                    &dir.join(&meta.weights_path),
                    Some(meta.weights_sha256.as_str()),
                )?;
                let record = TrainedModelRecord {
                    record_id: meta.record_id,
                    architecture: header.architecture.clone(),
                    dataset_name: header.dataset_name.clone(),
                    hyperparams: meta.hyperparams,
                    weights,
                    train_accuracy: meta.train_accuracy,
                    test_accuracy: meta.test_accuracy,
                    train_loss: meta.train_loss,
                    test_loss: meta.test_loss,
                    epsilon: meta.epsilon,
                    delta: meta.delta,
                };
                record.check_invariants()?;
                records.push(record);
            }
        }
    }
    Ok(ZooManifest {
        header,
        records,
        failed,
    })
}

pub(crate) fn record_meta(record: &TrainedModelRecord, sha256: String) -> RecordMeta {
    RecordMeta {
        record_id: record.record_id.clone(),
        hyperparams: record.hyperparams.clone(),
        train_accuracy: record.train_accuracy,
        test_accuracy: record.test_accuracy,
        train_loss: record.train_loss,
        test_loss: record.test_loss,
        epsilon: record.epsilon,
        delta: record.delta,
        weights_path: weights_rel_path(&record.record_id),
        weights_sha256: sha256,
    }
}

/// Re-emit a loaded zoo to a new directory (manifest plus weight files).
/// Lines are ordered by record id, matching the build order, so a
/// save -> load -> save round trip is byte-identical.
pub fn write_manifest(zoo: &ZooManifest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = manifest_path(dir);
    if path.exists() {
        fs::remove_file(&path)?;
    }
    append_line(&path, &ManifestLine::Header(Box::new(zoo.header.clone())))?;
    let mut entries: Vec<(String, ManifestLine)> = Vec::new();
    for record in &zoo.records {
        let sha = save_weights(
            &dir.join(weights_rel_path(&record.record_id)),
            &record.weights,
        )?;
        entries.push((
            record.record_id.clone(),
            ManifestLine::Record(Box::new(record_meta(record, sha))),
        ));
    }
    for (id, reason) in &zoo.failed {
        entries.push((
            id.clone(),
            ManifestLine::Failed {
                record_id: id.clone(),
                reason: reason.clone(),
            },
        ));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, line) in &entries {
        append_line(&path, line)?;
    }
    Ok(path)
}
