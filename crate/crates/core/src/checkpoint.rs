//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CISNETCK`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (config, variant, step, RNG state and the parameter
//! table), then every parameter as raw little-endian `f64` in table order.
//!
//! Files are written once: saving to an existing path is an error, and the data goes
//! to a temporary file in the target directory that is linked into place only when complete.

use std::io::{Read, Write};
use std::path::Path;

use cisnet_autograd::{Module, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::CODEC_ID;
use crate::config::TrainConfig;
use crate::error::{CisError, Result};
use crate::model::{StegoModel, Variant};

pub const MAGIC: &[u8; 8] = b"CISNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Full ChaCha8 stream position; restoring it resumes the exact random sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string, since JSON numbers cannot carry a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CisError::Checkpoint(format!("bad RNG position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    variant: Variant,
    step: u64,
    rng: RngState,
    codec: String,
    params: Vec<ParamEntry>,
}

/// A model plus the training position it was saved at.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: StegoModel,
    pub step: u64,
    pub rng: RngState,
    /// JPEG implementation in use when the checkpoint was written.
    pub codec: String,
}

impl ModelCheckpoint {
    pub fn new(model: StegoModel, step: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            model,
            step,
            rng: RngState::capture(rng),
            codec: CODEC_ID.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.model.named_params();
        let header = Header {
            config: self.model.config.clone(),
            variant: self.model.variant,
            step: self.step,
            rng: self.rng.clone(),
            codec: self.codec.clone(),
            params: named
                .iter()
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.value().shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = named.iter().map(|(_, p)| p.value().numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in &named {
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CisError::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CisError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header length"))?;
        let hlen = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| bad("header too large"))?;
        if hlen > r.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];

        header.config.validate()?;
        // initial values are overwritten below, so any seed will do
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = StegoModel::new(&header.config, header.variant, &mut rng)?;
        let mut slots = model.named_params_mut();
        if slots.len() != header.params.len() {
            return Err(CisError::Checkpoint(format!(
                "parameter count {} does not match the configured model ({})",
                header.params.len(),
                slots.len()
            )));
        }
        let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if r.len() != 8 * total {
            return Err(CisError::Checkpoint(format!(
                "payload holds {} bytes, header describes {}",
                r.len(),
                8 * total
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&header.params) {
            if *name != entry.name || slot.value().shape() != entry.shape.as_slice() {
                return Err(CisError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    slot.value().shape()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let (chunk, rest) = r.split_at(8 * n);
            r = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            slot.set(Tensor::new(&entry.shape, data));
        }
        drop(slots);
        Ok(Self {
            model,
            step: header.step,
            rng: header.rng,
            codec: header.codec,
        })
    }

    /// Atomic, write-once save.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.exists() {
            return Err(CisError::Checkpoint(format!(
                "{} already exists; checkpoints are never overwritten",
                path.display()
            )));
        }
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist_noclobber(path).map_err(|e| {
            CisError::Checkpoint(format!("could not place {}: {}", path.display(), e.error))
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
