//! Checkpoint directories: a text manifest plus a raw little-endian `f64`
//! blob, chained to their parents by lineage hashes.
//!
//! ```text
//! ckpt/
//!   manifest.txt   key = value lines
//!   weights.bin    every parameter, in named order
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{TransformerConfig, TransformerModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
pub const ROOT: &str = "root";

/// What produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    TeacherMlm,
    TeacherFinetune,
    General,
    TaskIntermediate,
    TaskPrediction,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Init,
        Stage::TeacherMlm,
        Stage::TeacherFinetune,
        Stage::General,
        Stage::TaskIntermediate,
        Stage::TaskPrediction,
        Stage::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::TeacherMlm => "teacher-mlm",
            Stage::TeacherFinetune => "teacher-finetune",
            Stage::General => "general",
            Stage::TaskIntermediate => "task-intermediate",
            Stage::TaskPrediction => "task-prediction",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub sha256: String,
}

/// Everything recorded in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub config: TransformerConfig,
    pub stage: Stage,
    /// Lineage hash of the parent, or `None` for a root.
    pub parent: Option<String>,
    pub lineage: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointInfo {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }

    pub fn parent_label(&self) -> &str {
        self.parent.as_deref().unwrap_or(ROOT)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage: {}", self.stage);
        let _ = writeln!(s, "parameters: {}", self.parameter_count());
        let _ = writeln!(s, "lineage: {}", self.lineage);
        let _ = writeln!(s, "parent: {}", self.parent_label());
        let _ = writeln!(s, "config: {}", serde_json::to_string(&self.config).expect("config serializes"));
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "metric {k}: {v}");
        }
        s
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn config_json(config: &TransformerConfig) -> String {
    serde_json::to_string(config).expect("config serializes")
}

/// `sha256(parent ‖ blob hash ‖ config ‖ stage)`.
pub fn lineage_hash(parent: Option<&str>, blob_sha256: &str, config: &TransformerConfig, stage: Stage) -> String {
    let mut h = Sha256::new();
    for part in [parent.unwrap_or(ROOT), blob_sha256, &config_json(config), stage.name()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    format!("{:x}", h.finalize())
}

fn blob(model: &TransformerModel) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(model.parameter_count() * 8);
    let mut entries = Vec::new();
    for (name, t) in model.named_params() {
        let offset = bytes.len();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: offset as u64,
            sha256: sha_hex(&bytes[offset..]),
        });
    }
    (bytes, entries)
}

/// Writes `model` to `dir`, returning the manifest contents.
pub fn save(
    dir: impl AsRef<Path>,
    model: &TransformerModel,
    stage: Stage,
    parent: Option<&str>,
    metrics: &BTreeMap<String, f64>,
) -> Result<CheckpointInfo> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (bytes, tensors) = blob(model);
    let blob_sha256 = sha_hex(&bytes);
    let info = CheckpointInfo {
        config: model.config().clone(),
        stage,
        parent: parent.map(str::to_string),
        lineage: lineage_hash(parent, &blob_sha256, model.config(), stage),
        blob_sha256,
        tensors,
        metrics: metrics.clone(),
    };
    fs::write(dir.join(WEIGHTS), &bytes)?;
    fs::write(dir.join(MANIFEST), format_manifest(&info))?;
    Ok(info)
}

pub fn format_manifest(info: &CheckpointInfo) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format = {FORMAT_VERSION}");
    let _ = writeln!(s, "stage = {}", info.stage);
    let _ = writeln!(s, "config = {}", config_json(&info.config));
    let _ = writeln!(s, "lineage.parent = {}", info.parent_label());
    let _ = writeln!(s, "lineage.hash = {}", info.lineage);
    let _ = writeln!(s, "blob.sha256 = {}", info.blob_sha256);
    for t in &info.tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "tensor.{} = {} {} {}", t.name, shape.join("x"), t.offset, t.sha256);
    }
    for (k, v) in &info.metrics {
        let _ = writeln!(s, "metric.{k} = {v:?}");
    }
    s
}

/// Parses a manifest; errors carry the byte offset of the offending line.
pub fn parse_manifest(text: &str, path: &Path) -> Result<CheckpointInfo> {
    let err = |offset: usize, msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| err(at, format!("expected `key = value`, got {line:?}")))?;
        if let Some(name) = key.strip_prefix("tensor.") {
            let parts: Vec<&str> = value.split(' ').collect();
            let [shape, off, sha] = parts[..] else {
                return Err(err(at, format!("malformed tensor entry {name}")));
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err(at, format!("bad shape for {name}")))?;
            let off = off.parse().map_err(|_| err(at, format!("bad offset for {name}")))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: off,
                sha256: sha.to_string(),
            });
        } else if let Some(name) = key.strip_prefix("metric.") {
            let v = value.parse().map_err(|_| err(at, format!("bad metric value {value:?}")))?;
            metrics.insert(name.to_string(), v);
        } else if fields.insert(key, (at, value)).is_some() {
            return Err(err(at, format!("duplicate key {key}")));
        }
    }
    let end = text.len();
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(end, format!("missing key {k}")));
    let (at, version) = get("format")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(err(at, format!("unsupported format {version}")));
    }
    let (at, stage) = get("stage")?;
    let stage = stage.parse().map_err(|e: Error| err(at, e.to_string()))?;
    let (at, config) = get("config")?;
    let config: TransformerConfig =
        serde_json::from_str(config).map_err(|e| err(at, format!("bad config: {e}")))?;
    let (_, parent) = get("lineage.parent")?;
    let parent = (parent != ROOT).then(|| parent.to_string());
    Ok(CheckpointInfo {
        config,
        stage,
        parent,
        lineage: get("lineage.hash")?.1.to_string(),
        blob_sha256: get("blob.sha256")?.1.to_string(),
        tensors,
        metrics,
    })
}

fn read_info(dir: &Path) -> Result<CheckpointInfo> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "manifest is not UTF-8".into(),
    })?;
    parse_manifest(&text, &path)
}

/// Reads and fully verifies a checkpoint without building the model.
pub fn inspect(dir: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let dir = dir.as_ref();
    let info = read_info(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS))?;
    verify(&info, &bytes, &dir.join(WEIGHTS))?;
    Ok(info)
}

fn verify(info: &CheckpointInfo, bytes: &[u8], blob_path: &Path) -> Result<()> {
    let err = |offset: u64, msg: String| Error::Checkpoint {
        path: blob_path.to_path_buf(),
        offset,
        msg,
    };
    let mut expected = 0u64;
    for t in &info.tensors {
        if t.offset != expected {
            return Err(err(t.offset, format!("tensor {} is not contiguous", t.name)));
        }
        let len = t.shape.iter().product::<usize>() as u64 * 8;
        let end = t.offset + len;
        if end > bytes.len() as u64 {
            return Err(err(bytes.len() as u64, format!("blob truncated inside tensor {}", t.name)));
        }
        if sha_hex(&bytes[t.offset as usize..end as usize]) != t.sha256 {
            return Err(err(t.offset, format!("checksum mismatch in tensor {}", t.name)));
        }
        expected = end;
    }
    if expected != bytes.len() as u64 {
        return Err(err(expected, "trailing bytes after last tensor".into()));
    }
    if sha_hex(bytes) != info.blob_sha256 {
        return Err(err(0, "blob checksum mismatch".into()));
    }
    let lineage = lineage_hash(info.parent.as_deref(), &info.blob_sha256, &info.config, info.stage);
    if lineage != info.lineage {
        return Err(Error::Lineage(format!(
            "recorded hash {} does not match recomputed {lineage}",
            info.lineage
        )));
    }
    Ok(())
}

/// Loads and verifies a checkpoint.
pub fn load(dir: impl AsRef<Path>) -> Result<(TransformerModel, CheckpointInfo)> {
    let dir = dir.as_ref();
    let info = read_info(dir)?;
    let blob_path = dir.join(WEIGHTS);
    let bytes = fs::read(&blob_path)?;
    verify(&info, &bytes, &blob_path)?;
    let mut model = TransformerModel::new(info.config.clone())?;
    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != info.tensors.len() {
        return Err(Error::Checkpoint {
            path: blob_path,
            offset: 0,
            msg: format!("expected {} tensors, manifest lists {}", names.len(), info.tensors.len()),
        });
    }
    for ((slot, (name, shape)), entry) in model.params_mut().into_iter().zip(&names).zip(&info.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint {
                path: blob_path,
                offset: entry.offset,
                msg: format!("tensor {} {:?} does not fit {name} {shape:?}", entry.name, entry.shape),
            });
        }
        let start = entry.offset as usize;
        let data = bytes[start..start + slot.numel() * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::new(shape.clone(), data)?;
    }
    Ok((model, info))
}

/// Checks that each checkpoint's parent is the next one's lineage hash and
/// that the last is a root. `dirs` runs from newest to oldest.
pub fn verify_chain(dirs: &[PathBuf]) -> Result<Vec<CheckpointInfo>> {
    let infos = dirs.iter().map(inspect).collect::<Result<Vec<_>>>()?;
    for (i, pair) in infos.windows(2).enumerate() {
        if pair[0].parent.as_deref() != Some(pair[1].lineage.as_str()) {
            return Err(Error::Lineage(format!(
                "{} does not descend from {}",
                dirs[i].display(),
                dirs[i + 1].display()
            )));
        }
    }
    if let Some(last) = infos.last() {
        if last.parent.is_some() {
            return Err(Error::Lineage(format!("{} is not a root", dirs[dirs.len() - 1].display())));
        }
    }
    Ok(infos)
}
