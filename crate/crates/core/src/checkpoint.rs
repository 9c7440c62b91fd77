//! Checkpoint directories: `manifest.json` describes every tensor (name,
//! shape, dtype, byte offset) and `tensors.bin` holds the little-endian
//! values back to back. Nothing time-dependent is written, so equal training
//! runs give byte-identical checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{EhrModel, ModelError, ModelShape};
use crate::optim::Adam;
use crate::real::Real;
use crate::trainer::{TrainConfig, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT: &str = "ehrpd-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Format(String),
    #[error("checkpoint holds {found} tensors, expected {expected}")]
    Dtype {
        found: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal position in the keystream.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bad = || CheckpointError::Format("malformed rng state".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub epoch: usize,
    pub mean_gap: f64,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Parses and checks the internal consistency of a manifest.
    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format {} version {}",
                m.format, m.version
            )));
        }
        let width = match m.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(CheckpointError::Format(format!("unknown dtype {other}"))),
        };
        let mut expect = 0u64;
        for t in &m.tensors {
            if t.offset != expect {
                return Err(CheckpointError::Format(format!(
                    "tensor {} is not contiguous",
                    t.name
                )));
            }
            let bytes = (t.shape[0] as u64)
                .checked_mul(t.shape[1] as u64)
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| {
                    CheckpointError::Format(format!("tensor {} is too large", t.name))
                })?;
            expect = expect
                .checked_add(bytes)
                .ok_or_else(|| CheckpointError::Format("tensor data too large".into()))?;
        }
        if expect != m.total_bytes {
            return Err(CheckpointError::Format(format!(
                "tensors cover {expect} bytes, manifest declares {}",
                m.total_bytes
            )));
        }
        m.rng.restore()?;
        Ok(m)
    }
}

/// Splits `bytes` into the tensors listed by a parsed manifest.
pub fn decode_tensors<T: Real>(
    manifest: &Manifest,
    bytes: &[u8],
) -> Result<Vec<Tensor<T>>, CheckpointError> {
    if manifest.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: manifest.dtype.clone(),
            expected: T::DTYPE,
        });
    }
    if bytes.len() as u64 != manifest.total_bytes {
        return Err(CheckpointError::Format(format!(
            "tensor file has {} bytes, manifest declares {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    manifest
        .tensors
        .iter()
        .map(|t| {
            let range = usize::try_from(t.offset).ok().and_then(|start| {
                let len = t.shape[0].checked_mul(t.shape[1])?.checked_mul(T::BYTES)?;
                let end = start.checked_add(len)?;
                (end <= bytes.len()).then_some(start..end)
            });
            let range = range.ok_or_else(|| {
                CheckpointError::Format(format!("tensor {} is out of bounds", t.name))
            })?;
            let data = bytes[range]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            Ok(Tensor::from_vec(t.shape[0], t.shape[1], data))
        })
        .collect()
}

/// Manifest and tensor bytes of a training state.
pub fn encode<T: Real>(state: &TrainState<T>) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let store = &state.model.store;
    let mut push = |name: &str, role: TensorRole, rows: usize, cols: usize, data: &[T]| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            shape: [rows, cols],
            offset: bytes.len() as u64,
        });
        for &x in data {
            x.write_le(&mut bytes);
        }
    };
    for e in store.entries() {
        push(
            &e.name,
            TensorRole::Param,
            e.value.rows,
            e.value.cols,
            &e.value.data,
        );
    }
    for (role, moments) in [
        (TensorRole::AdamM, &state.optimizer.m),
        (TensorRole::AdamV, &state.optimizer.v),
    ] {
        for (e, m) in store.entries().iter().zip(moments) {
            push(&e.name, role, e.value.rows, e.value.cols, m);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        config: state.config.clone(),
        shape: state.model.shape.clone(),
        epoch: state.epoch,
        mean_gap: state.model.mean_gap,
        rng: RngState::of(&state.rng),
        optimizer_step: state.optimizer.step,
        total_bytes: bytes.len() as u64,
        tensors,
    };
    (manifest, bytes)
}

/// Rebuilds a training state from a parsed manifest and its tensors.
pub fn decode<T: Real>(
    manifest: &Manifest,
    bytes: &[u8],
) -> Result<TrainState<T>, CheckpointError> {
    let values = decode_tensors::<T>(manifest, bytes)?;
    let mut model = EhrModel::<T>::new(
        &manifest.config.model,
        &manifest.shape,
        manifest.config.seed,
    )?;
    model.mean_gap = manifest.mean_gap;
    let mut optimizer = Adam::new(manifest.config.optimizer, &model.store);
    optimizer.step = manifest.optimizer_step;
    let mut seen = vec![[false; 3]; model.store.len()];
    for (entry, value) in manifest.tensors.iter().zip(values) {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| CheckpointError::Format(format!("unknown tensor {}", entry.name)))?;
        let current = model.store.get(id);
        if (current.rows, current.cols) != (value.rows, value.cols) {
            return Err(CheckpointError::Format(format!(
                "tensor {} has shape {:?}, model expects [{}, {}]",
                entry.name, entry.shape, current.rows, current.cols
            )));
        }
        let slot = match entry.role {
            TensorRole::Param => 0,
            TensorRole::AdamM => 1,
            TensorRole::AdamV => 2,
        };
        if std::mem::replace(&mut seen[id.0][slot], true) {
            return Err(CheckpointError::Format(format!(
                "tensor {} appears twice",
                entry.name
            )));
        }
        match entry.role {
            TensorRole::Param => *model.store.get_mut(id) = value,
            TensorRole::AdamM => optimizer.m[id.0] = value.data,
            TensorRole::AdamV => optimizer.v[id.0] = value.data,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s[0]) {
        return Err(CheckpointError::Format(format!(
            "missing tensor {}",
            model.store.entries()[i].name
        )));
    }
    Ok(TrainState {
        config: manifest.config.clone(),
        model,
        optimizer,
        rng: manifest.rng.restore()?,
        epoch: manifest.epoch,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save<T: Real>(state: &TrainState<T>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, bytes) = encode(state);
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, bytes).map_err(io_err(&tpath))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let mpath = dir.join(MANIFEST_FILE);
    Manifest::parse(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)
}

pub fn load<T: Real>(dir: &Path) -> Result<TrainState<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    let tpath = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tpath).map_err(io_err(&tpath))?;
    decode(&manifest, &bytes)
}
