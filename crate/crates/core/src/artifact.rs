//! On-disk artifacts: newline-delimited JSON records with a sidecar manifest
//! carrying schema, checksum and lineage.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::model::PayloadKind;

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Trajectories,
    Segments,
    Labels,
    AtomicPolicy,
    Counterfactuals,
    Dataset,
    Tokens,
    Entropy,
    Benchmark,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 9] = [
        ArtifactKind::Trajectories,
        ArtifactKind::Segments,
        ArtifactKind::Labels,
        ArtifactKind::AtomicPolicy,
        ArtifactKind::Counterfactuals,
        ArtifactKind::Dataset,
        ArtifactKind::Tokens,
        ArtifactKind::Entropy,
        ArtifactKind::Benchmark,
    ];

    pub fn schema(&self) -> &'static str {
        match self {
            ArtifactKind::Trajectories => "cfnav.trajectories",
            ArtifactKind::Segments => "cfnav.segments",
            ArtifactKind::Labels => "cfnav.labels",
            ArtifactKind::AtomicPolicy => "cfnav.atomic_policy",
            ArtifactKind::Counterfactuals => "cfnav.counterfactuals",
            ArtifactKind::Dataset => "cfnav.labeled_dataset",
            ArtifactKind::Tokens => "cfnav.tokens",
            ArtifactKind::Entropy => "cfnav.entropy",
            ArtifactKind::Benchmark => "cfnav.benchmark",
        }
    }

    pub fn from_schema(schema: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.schema() == schema)
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            ArtifactKind::Trajectories => "trajectories.jsonl",
            ArtifactKind::Segments => "segments.jsonl",
            ArtifactKind::Labels => "labels.jsonl",
            ArtifactKind::AtomicPolicy => "atomic_policy.json",
            ArtifactKind::Counterfactuals => "counterfactuals.jsonl",
            ArtifactKind::Dataset => "dataset.jsonl",
            ArtifactKind::Tokens => "tokens.jsonl",
            ArtifactKind::Entropy => "entropy.json",
            ArtifactKind::Benchmark => "benchmark.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub schema_version: u32,
    pub stage: String,
    pub file: String,
    pub sha256: String,
    pub records: usize,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub code_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_kind: Option<PayloadKind>,
    /// Record counts per provenance (datasets) or per label (segments).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
}

/// Lineage and dataset metadata for a manifest; the checksum and record
/// count are filled in on write.
#[derive(Debug, Clone, Default)]
pub struct Lineage {
    pub stage: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub normalization_factor: Option<f64>,
    pub payload_kind: Option<PayloadKind>,
    pub counts: BTreeMap<String, usize>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn finish(kind: ArtifactKind, path: &Path, bytes: &[u8], records: usize, lineage: Lineage) -> Result<Manifest> {
    let manifest = Manifest {
        schema: kind.schema().to_string(),
        schema_version: SCHEMA_VERSION,
        stage: lineage.stage,
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: sha256_hex(bytes),
        records,
        config_hash: lineage.config_hash,
        input_hashes: lineage.input_hashes,
        code_version: CODE_VERSION.to_string(),
        seed: lineage.seed,
        normalization_factor: lineage.normalization_factor,
        payload_kind: lineage.payload_kind,
        counts: lineage.counts,
    };
    // data first: a manifest never points at a file that is not there yet
    write_atomic(path, bytes)?;
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    write_atomic(&manifest_path(path), &m)?;
    Ok(manifest)
}

pub fn write_jsonl<T: Serialize>(kind: ArtifactKind, path: &Path, records: &[T], lineage: Lineage) -> Result<Manifest> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    finish(kind, path, &bytes, records.len(), lineage)
}

pub fn write_json<T: Serialize>(kind: ArtifactKind, path: &Path, value: &T, lineage: Lineage) -> Result<Manifest> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    finish(kind, path, &bytes, 1, lineage)
}

/// Reads and checks a manifest: known schema and version, file present and
/// matching its checksum. Returns the manifest and the file bytes.
pub fn verify(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mpath = manifest_path(path);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if ArtifactKind::from_schema(&manifest.schema).is_none() || manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::UnknownSchema {
            schema: manifest.schema,
            version: manifest.schema_version,
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.sha256 {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: manifest.sha256,
            actual,
        });
    }
    Ok((manifest, bytes))
}

fn expect_kind(manifest: &Manifest, kind: ArtifactKind) -> Result<()> {
    if manifest.schema != kind.schema() {
        return Err(Error::UnknownSchema {
            schema: manifest.schema.clone(),
            version: manifest.schema_version,
        });
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(kind: ArtifactKind, path: &Path) -> Result<(Vec<T>, Manifest)> {
    let (manifest, bytes) = verify(path)?;
    expect_kind(&manifest, kind)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Precondition(format!("{}: {e}", path.display())))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((records, manifest))
}

pub fn read_json<T: DeserializeOwned>(kind: ArtifactKind, path: &Path) -> Result<(T, Manifest)> {
    let (manifest, bytes) = verify(path)?;
    expect_kind(&manifest, kind)?;
    Ok((serde_json::from_slice(&bytes)?, manifest))
}
