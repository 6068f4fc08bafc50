//! Checkpoints and the two weight-transfer strategies.
//!
//! * Full transfer: encoder and softmax head are both carried over; the
//!   target task must have the same number of classes.
//! * Encoder-only transfer: only the encoder is carried over and a fresh
//!   head is seeded for the target scheme, which may have a different
//!   number of classes.
//!
//! # File layout
//!
//! ```text
//! magic    8 bytes   b"OFFXCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes UTF-8 JSON (config, fingerprint, provenance, head
//!                    scheme, tensor directory)
//! payload  f32 LE    every tensor in directory order, row-major;
//!                    encoder tensors first, head tensors last
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use web_time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, ClassifierModel, HeadInit, HeadState, TrainConfig};
use crate::corpus::LabelScheme;
use crate::encoder::{
    EncoderConfig, EncoderError, EncoderParams, EncoderState, Parameters, TrainableEncoder,
};

pub const MAGIC: &[u8; 8] = b"OFFXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no classification head")]
    MissingHead,
    #[error("class count mismatch: checkpoint head has {source_k} classes, target scheme has {target_k}")]
    ClassCountMismatch { source_k: usize, target_k: usize },
    #[error("invalid label mapping: {0}")]
    LabelMapping(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

fn malformed(msg: impl Into<String>) -> TransferError {
    TransferError::Malformed(msg.into())
}

/// Where the weights came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_dataset: String,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    /// Seconds since the Unix epoch. Excluded from determinism comparisons.
    pub created_unix: u64,
    pub encoder_fingerprint: String,
}

/// How a source checkpoint initializes a target model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Encoder and head; class counts must match.
    Full,
    /// Encoder only, with a freshly seeded head.
    EncoderOnly,
}

/// Provenance fields supplied by the caller at export time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceInfo {
    pub dataset: String,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCheckpoint {
    pub state: HeadState,
    pub scheme: LabelScheme,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder: EncoderState,
    pub head: Option<HeadCheckpoint>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    fingerprint: String,
    encoder_config: EncoderConfig,
    provenance: Provenance,
    head: Option<HeadHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    scheme: LabelScheme,
    bias: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

/// Which parts of a checkpoint file to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadMode {
    Full,
    /// Stops after the encoder tensors; head bytes are never read.
    EncoderOnly,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Snapshots a model's weights. The head (and its scheme) is included only
/// when `include_head` is set.
pub fn export_checkpoint(
    model: &ClassifierModel<EncoderState>,
    include_head: bool,
    source: SourceInfo,
) -> Result<Checkpoint, TransferError> {
    let encoder = model.encoder().clone();
    // Re-validate in case the parameters were edited in place.
    EncoderState::from_parts(
        encoder.config().clone(),
        encoder.clone().into_params(),
        Some(encoder.fingerprint()),
    )?;
    let head = include_head.then(|| HeadCheckpoint {
        state: model.head().clone(),
        scheme: model.scheme().clone(),
    });
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        provenance: Provenance {
            source_dataset: source.dataset,
            train_config: source.train_config,
            seed: source.seed,
            created_unix: now_unix(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
        },
        encoder,
        head,
    })
}

fn check_version(version: u32) -> Result<(), TransferError> {
    if version != FORMAT_VERSION {
        return Err(TransferError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Rebuilds the exported model: encoder, head and scheme as stored.
pub fn import_full(ckpt: &Checkpoint) -> Result<ClassifierModel<EncoderState>, TransferError> {
    check_version(ckpt.format_version)?;
    let head = ckpt.head.as_ref().ok_or(TransferError::MissingHead)?;
    Ok(ClassifierModel::new(
        ckpt.encoder.clone(),
        head.state.clone(),
        head.scheme.clone(),
    )?)
}

/// Takes the encoder only and seeds a new head for `target_scheme`. The head
/// uses the same initialization as a from-scratch model, with a bias term.
pub fn import_encoder_only(
    ckpt: &Checkpoint,
    target_scheme: &LabelScheme,
    seed: u64,
) -> Result<ClassifierModel<EncoderState>, TransferError> {
    check_version(ckpt.format_version)?;
    Ok(ClassifierModel::with_fresh_head(
        ckpt.encoder.clone(),
        target_scheme.clone(),
        HeadInit::Normal,
        true,
        seed,
    )?)
}

/// Moves a fully transferred model onto the target task's scheme.
///
/// Without a mapping, classes correspond by position. With a mapping
/// (source class name to target class name, e.g. `offensive` to
/// `hate offensive`), head rows are reordered to follow the target
/// scheme. Class counts must match in both cases.
pub fn remap_head(
    model: ClassifierModel<EncoderState>,
    target: &LabelScheme,
    mapping: Option<&BTreeMap<String, String>>,
) -> Result<ClassifierModel<EncoderState>, TransferError> {
    let source_k = model.scheme().len();
    if source_k != target.len() {
        return Err(TransferError::ClassCountMismatch {
            source_k,
            target_k: target.len(),
        });
    }
    let (encoder, head, source) = model.into_parts();
    let Some(mapping) = mapping else {
        return Ok(ClassifierModel::new(encoder, head, target.clone())?);
    };
    // target index -> source index
    let mut rows = vec![None; target.len()];
    for (src_name, dst_name) in mapping {
        let s = source
            .index_of(src_name)
            .ok_or_else(|| TransferError::LabelMapping(format!("`{src_name}` is not a source class")))?;
        let t = target
            .index_of(dst_name)
            .ok_or_else(|| TransferError::LabelMapping(format!("`{dst_name}` is not a target class")))?;
        if rows[t].replace(s).is_some() {
            return Err(TransferError::LabelMapping(format!("`{dst_name}` is mapped twice")));
        }
    }
    let rows: Vec<usize> = rows
        .into_iter()
        .enumerate()
        .map(|(t, s)| {
            s.ok_or_else(|| {
                TransferError::LabelMapping(format!("target class `{}` is unmapped", target.classes()[t]))
            })
        })
        .collect::<Result<_, _>>()?;
    let weight = head.weight.select(ndarray::Axis(0), &rows);
    let bias = head.bias.map(|b| b.select(ndarray::Axis(1), &rows));
    Ok(ClassifierModel::new(encoder, HeadState { weight, bias }, target.clone())?)
}

impl Checkpoint {
    fn header(&self) -> Header {
        let mut tensors: Vec<TensorEntry> = self
            .encoder
            .params()
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
            })
            .collect();
        if let Some(head) = &self.head {
            tensors.extend(head.state.tensors().into_iter().map(|(name, t)| TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
            }));
        }
        Header {
            format_version: self.format_version,
            fingerprint: self.encoder.fingerprint().to_string(),
            encoder_config: self.encoder.config().clone(),
            provenance: self.provenance.clone(),
            head: self.head.as_ref().map(|h| HeadHeader {
                scheme: h.scheme.clone(),
                bias: h.state.bias.is_some(),
            }),
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut tensors = self.encoder.params().tensors();
        if let Some(head) = &self.head {
            tensors.extend(head.state.tensors());
        }
        let mut buf = Vec::new();
        for (_, t) in tensors {
            buf.clear();
            buf.reserve(t.len() * 4);
            for &v in t.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransferError> {
        Self::read_from(bytes, ReadMode::Full)
    }

    /// Parses a checkpoint. In [`ReadMode::EncoderOnly`] the reader is not
    /// advanced past the encoder tensors and `head` is `None`.
    pub fn read_from<R: Read>(mut r: R, mode: ReadMode) -> Result<Self, TransferError> {
        let io_err = |e: io::Error| malformed(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(TransferError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io_err)?;
        check_version(u32::from_le_bytes(word))?;
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io_err)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| malformed("header too large"))?;
        let mut header_bytes = vec![0u8; len];
        r.read_exact(&mut header_bytes).map_err(io_err)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| malformed(format!("bad header: {e}")))?;
        check_version(header.format_version)?;
        if header.provenance.encoder_fingerprint != header.fingerprint {
            return Err(malformed("provenance fingerprint differs from header fingerprint"));
        }

        let config = header.encoder_config;
        let encoder_shapes = config.parameter_shapes();
        if header.tensors.len() < encoder_shapes.len() {
            return Err(malformed("tensor directory is shorter than the encoder"));
        }
        let (encoder_entries, head_entries) = header.tensors.split_at(encoder_shapes.len());
        let mut encoder_tensors = Vec::with_capacity(encoder_entries.len());
        for (entry, (name, shape)) in encoder_entries.iter().zip(&encoder_shapes) {
            if entry.name != *name || (entry.shape[0], entry.shape[1]) != *shape {
                return Err(malformed(format!(
                    "directory entry `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            encoder_tensors.push((entry.name.clone(), read_tensor(&mut r, entry.shape)?));
        }
        let params = EncoderParams::from_tensors(&config, encoder_tensors)?;
        let encoder = EncoderState::from_parts(config, params, Some(&header.fingerprint))?;

        let head = match (mode, header.head) {
            (ReadMode::EncoderOnly, _) => None,
            (ReadMode::Full, None) => {
                if !head_entries.is_empty() {
                    return Err(malformed("head tensors present without a head scheme"));
                }
                None
            }
            (ReadMode::Full, Some(meta)) => {
                let k = meta.scheme.len();
                let h = encoder.config().hidden_size;
                let mut expected = vec![("head.weight", [k, h])];
                if meta.bias {
                    expected.push(("head.bias", [1, k]));
                }
                if head_entries.len() != expected.len() {
                    return Err(malformed("head tensor directory does not match the head scheme"));
                }
                let mut tensors = Vec::new();
                for (entry, (name, shape)) in head_entries.iter().zip(expected) {
                    if entry.name != name || entry.shape != shape {
                        return Err(malformed(format!(
                            "head entry `{}` {:?}, expected `{name}` {shape:?}",
                            entry.name, entry.shape
                        )));
                    }
                    tensors.push(read_tensor(&mut r, entry.shape)?);
                }
                let mut tensors = tensors.into_iter();
                let weight = tensors.next().expect("weight entry");
                Some(HeadCheckpoint {
                    state: HeadState {
                        weight,
                        bias: tensors.next(),
                    },
                    scheme: meta.scheme,
                })
            }
        };
        if mode == ReadMode::Full {
            let mut rest = [0u8; 1];
            if r.read(&mut rest).map_err(io_err)? != 0 {
                return Err(malformed("trailing bytes after the last tensor"));
            }
        }
        Ok(Self {
            format_version: header.format_version,
            encoder,
            head,
            provenance: header.provenance,
        })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), TransferError> {
        let io_err = |source| TransferError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        self.write_to(io::BufWriter::new(tmp.as_file_mut())).map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TransferError> {
        Self::load_with(path, ReadMode::Full)
    }

    pub fn load_encoder_only(path: &Path) -> Result<Self, TransferError> {
        Self::load_with(path, ReadMode::EncoderOnly)
    }

    fn load_with(path: &Path, mode: ReadMode) -> Result<Self, TransferError> {
        let file = fs::File::open(path).map_err(|source| TransferError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(io::BufReader::new(file), mode)
    }

    /// Same checkpoint with the creation timestamp zeroed, for comparisons
    /// that must ignore when the file was written.
    pub fn without_timestamp(&self) -> Self {
        let mut c = self.clone();
        c.provenance.created_unix = 0;
        c
    }
}

fn read_tensor<R: Read>(r: &mut R, shape: [usize; 2]) -> Result<Array2<f64>, TransferError> {
    let n = shape[0]
        .checked_mul(shape[1])
        .ok_or_else(|| malformed("tensor too large"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| malformed(format!("truncated tensor payload: {e}")))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Array2::from_shape_vec((shape[0], shape[1]), values).expect("length matches shape"))
}
