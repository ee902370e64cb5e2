//! Feature files, manifests, tokenization, batching and the synthetic corpus.

mod batch;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch};
pub use synth::{gen_synthetic_corpus, nearest_prototype_accuracy, prototypes, synthesize, SynthConfig, SynthCorpus, SynthUtterance};
pub use vocab::{Vocabulary, CHAR_VOCAB};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::layers::FEATURE_DIM;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SPFC";
pub const FEATURE_VERSION: u16 = 1;
/// Input frame rate of feature files.
pub const FEATURE_RATE_HZ: f64 = 100.0;
/// Environment variable naming the default corpus root.
pub const DATA_ENV: &str = "SPLITFORMER_DATA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: not a feature file (bad magic)")]
    Magic(PathBuf),
    #[error("{path}: unsupported feature version {version}")]
    Version { path: PathBuf, version: u16 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: feature dimension {dim}, expected 80")]
    Dim { path: PathBuf, dim: usize },
    #[error("{0}: empty utterance (T = 0)")]
    Empty(PathBuf),
    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("cannot encode {ch:?} at position {pos}")]
    Unencodable { pos: usize, ch: char },
    #[error("token id {0} outside vocabulary")]
    UnknownId(usize),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `[T × 80]` matrix at 100 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Tensor<f32>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode_features(frames: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[1] != FEATURE_DIM {
        return Err(DataError::Invalid(format!("features must be [T x 80], got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(DataError::Invalid("empty utterance (T = 0)".into()));
    }
    let mut out = Vec::with_capacity(14 + frames.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    out.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let truncated = |expected| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 14 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != FEATURE_MAGIC {
            DataError::Magic(path.to_path_buf())
        } else {
            truncated(14)
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::Magic(path.to_path_buf()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if d != FEATURE_DIM {
        return Err(DataError::Dim {
            path: path.to_path_buf(),
            dim: d,
        });
    }
    if t == 0 {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    let expected = 14 + t * d * 4;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let data = bytes[14..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&[t, d], data).expect("length checked"))
}

pub fn write_features(path: &Path, frames: &Tensor<f32>) -> Result<(), DataError> {
    let bytes = encode_features(frames)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// As written in the manifest, relative to its directory.
    pub path: PathBuf,
    pub transcript: String,
}

/// `id<TAB>path<TAB>transcript` lines; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn load_features(&self, r: &Record) -> Result<FeatureSequence, DataError> {
        Ok(FeatureSequence {
            id: r.id.clone(),
            frames: read_features(&self.feature_path(r))?,
        })
    }

    pub fn parse(text: &str, root: &Path, origin: &Path) -> Result<Self, DataError> {
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |detail: &str| DataError::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                detail: detail.to_string(),
            };
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(path), Some(transcript)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected id<TAB>path<TAB>transcript"));
            };
            if id.is_empty() || path.is_empty() {
                return Err(bad("empty id or path"));
            }
            if !seen.insert(id.to_string()) {
                return Err(DataError::DuplicateId(id.to_string()));
            }
            records.push(Record {
                id: id.to_string(),
                path: PathBuf::from(path),
                transcript: transcript.to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn to_tsv(&self) -> Result<String, DataError> {
        let mut out = String::new();
        for r in &self.records {
            let path = r.path.to_str().ok_or_else(|| DataError::Invalid(format!("non-UTF-8 path for {}", r.id)))?;
            if [&r.id[..], path, &r.transcript[..]].iter().any(|s| s.contains(['\t', '\n', '\r'])) {
                return Err(DataError::Invalid(format!("record {} contains a tab or newline", r.id)));
            }
            out.push_str(&format!("{}\t{}\t{}\n", r.id, path, r.transcript));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, path)
    }

    /// Loads and also checks that every feature file exists.
    pub fn load_checked(path: &Path) -> Result<Self, DataError> {
        let m = Self::load(path)?;
        for r in &m.records {
            let p = m.feature_path(r);
            if !p.is_file() {
                return Err(DataError::Io {
                    path: p,
                    source: io::Error::new(io::ErrorKind::NotFound, "feature file missing"),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_tsv()?).map_err(io_err(path))
    }
}

/// Corpus directory: `--data` if given, else `$SPLITFORMER_DATA`.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}
