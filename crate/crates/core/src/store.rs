//! Durable snapshots of learned state.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PALS" | u32 format_version | u64 json_len | json | u64 vec_len | PALE v2 block | sha256 of all preceding bytes
//! ```
//!
//! The JSON header holds labels, counts, timestamps, rules and decisions. The
//! vectors (class example sums and face templates) live in the PALE block at
//! full f64 precision. Raw frame bytes are never written. Saves go to a
//! temporary file in the target directory and are renamed into place, so a
//! crash mid-save leaves the previous snapshot intact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emb_format::{self, EmbFormatError, Precision};
use crate::embedding::Embedding;
use crate::face::FaceTemplate;
use crate::imprint::ImprintedClass;
use crate::labeling::LabelDecision;
use crate::trigger::TriggerRule;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PALS";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("unsupported snapshot format version {0}")]
    UnsupportedVersion(u32),
}

impl From<EmbFormatError> for StoreError {
    fn from(e: EmbFormatError) -> Self {
        match e {
            EmbFormatError::Io(e) => StoreError::IoFailure(e),
            other => StoreError::CorruptSnapshot(other.to_string()),
        }
    }
}

/// Everything learned so far. `version` counts snapshots taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub version: u64,
    pub classes: Vec<ImprintedClass>,
    pub faces: Vec<FaceTemplate>,
    pub labels: BTreeMap<String, LabelDecision>,
    pub rules: Vec<TriggerRule>,
    pub created_at: i64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    created_at: i64,
    dim: usize,
    classes: Vec<ClassMeta>,
    faces: Vec<FaceMeta>,
    labels: BTreeMap<String, LabelDecision>,
    rules: Vec<TriggerRule>,
}

#[derive(Serialize, Deserialize)]
struct ClassMeta {
    label: String,
    example_count: u64,
    created_at: i64,
}

#[derive(Serialize, Deserialize)]
struct FaceMeta {
    person: String,
    templates: usize,
    created_at: i64,
}

impl StoreSnapshot {
    fn dim(&self) -> usize {
        self.classes
            .first()
            .map(|c| c.example_sum.len())
            .or_else(|| self.faces.first().and_then(|f| f.templates.first()).map(Embedding::dim))
            .unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let dim = self.dim();
        let header = Header {
            version: self.version,
            created_at: self.created_at,
            dim,
            classes: self
                .classes
                .iter()
                .map(|c| ClassMeta { label: c.label.clone(), example_count: c.example_count, created_at: c.created_at })
                .collect(),
            faces: self
                .faces
                .iter()
                .map(|f| FaceMeta { person: f.person.clone(), templates: f.templates.len(), created_at: f.created_at })
                .collect(),
            labels: self.labels.clone(),
            rules: self.rules.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;

        let mut records: Vec<(String, Vec<f64>)> = Vec::new();
        for c in &self.classes {
            records.push((format!("class:{}", c.label), c.example_sum.clone()));
        }
        for f in &self.faces {
            for (i, t) in f.templates.iter().enumerate() {
                records.push((format!("face:{}:{i}", f.person), t.to_vec()));
            }
        }
        let mut vectors = Vec::new();
        emb_format::write_f64(&mut vectors, dim, &records)?;

        let mut out = Vec::with_capacity(json.len() + vectors.len() + 64);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
        out.extend_from_slice(&vectors);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |m: &str| StoreError::CorruptSnapshot(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let format = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if format != SNAPSHOT_FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(format));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos: usize = 8;
        let mut take = |n: usize| -> Result<&[u8], StoreError> {
            let end = pos.checked_add(n).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated section"))?;
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let json_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let json = take(json_len)?;
        let vec_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut vectors = take(vec_len)?;
        if pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }

        let header: Header = serde_json::from_slice(json).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        let file = emb_format::read(&mut vectors)?;
        if file.precision != Precision::F64 {
            return Err(corrupt("vector block is not f64"));
        }
        if !file.records.is_empty() && file.dim != header.dim {
            return Err(corrupt("vector dimension disagrees with header"));
        }
        let mut records = file.records.into_iter();
        let mut next = |expect: &str| -> Result<Vec<f64>, StoreError> {
            match records.next() {
                Some((id, v)) if id == expect => Ok(v),
                _ => Err(StoreError::CorruptSnapshot(format!("missing vector `{expect}`"))),
            }
        };

        let mut classes = Vec::with_capacity(header.classes.len());
        for m in header.classes {
            let sum = next(&format!("class:{}", m.label))?;
            let class = ImprintedClass::from_parts(m.label, sum, m.example_count, m.created_at)
                .map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
            classes.push(class);
        }
        let mut faces = Vec::with_capacity(header.faces.len());
        for m in header.faces {
            let mut templates = Vec::with_capacity(m.templates);
            for i in 0..m.templates {
                let v = next(&format!("face:{}:{i}", m.person))?;
                templates.push(Embedding::from_unit(v).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?);
            }
            faces.push(FaceTemplate { person: m.person, templates, created_at: m.created_at });
        }
        if records.next().is_some() {
            return Err(corrupt("unreferenced vectors"));
        }
        Ok(StoreSnapshot {
            version: header.version,
            classes,
            faces,
            labels: header.labels,
            rules: header.rules,
            created_at: header.created_at,
        })
    }
}

/// Writes through `fill` into a temporary sibling of `path`, syncs it, then
/// renames it over `path`. If `fill` fails the target is untouched.
pub fn atomic_write<F>(path: &Path, fill: F) -> Result<(), StoreError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    fill(tmp.as_file_mut())?;
    tmp.as_file_mut().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::IoFailure(e.error))?;
    Ok(())
}

pub fn save(path: &Path, snapshot: &StoreSnapshot) -> Result<(), StoreError> {
    let bytes = snapshot.to_bytes()?;
    atomic_write(path, |w| w.write_all(&bytes))
}

pub fn load(path: &Path) -> Result<StoreSnapshot, StoreError> {
    StoreSnapshot::from_bytes(&fs::read(path)?)
}
