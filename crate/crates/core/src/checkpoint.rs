//! Checkpoint container: magic, format version, a JSON header (config, iteration, RNG and
//! sampler state), then named little-endian `f32` tensors. Writes go through a temporary file
//! and a rename so an interrupted save never clobbers the previous checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, Param};

pub const MAGIC: &[u8; 8] = b"DSTLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: JSON numbers cannot carry a full `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Position in the epoch-shuffled training order. The order of epoch `k` is a pure function
/// of `(seed, k)`, so only these counters need saving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub iteration: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub rng: RngState,
    pub sampler: SamplerState,
    /// Class frequencies of each labeled factor, from the training split.
    pub frequencies: Vec<Vec<f64>>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: BTreeMap::new() }
    }

    pub fn put_params<'a>(&mut self, prefix: &str, params: impl IntoIterator<Item = (String, &'a Param)>) {
        for (name, p) in params {
            self.tensors.insert(
                format!("{prefix}.{name}"),
                StoredTensor { shape: p.shape.clone(), data: p.value.clone() },
            );
        }
    }

    /// Copies stored values into `params`; every name must be present with the same shape.
    pub fn load_params<'a>(
        &self,
        prefix: &str,
        params: impl IntoIterator<Item = (String, &'a mut Param)>,
    ) -> Result<()> {
        for (name, p) in params {
            let key = format!("{prefix}.{name}");
            let t =
                self.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, network expects {:?}",
                    t.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&t.data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn put_adam(&mut self, name: &str, opt: &Adam) {
        self.meta.optimizer_steps.insert(name.to_string(), opt.state.step);
        for (i, (m, v)) in opt.state.first.iter().zip(&opt.state.second).enumerate() {
            for (kind, buf) in [("m", m), ("v", v)] {
                self.tensors.insert(
                    format!("adam.{name}.{kind}.{i}"),
                    StoredTensor { shape: vec![buf.len()], data: buf.clone() },
                );
            }
        }
    }

    pub fn load_adam(&self, name: &str, opt: &mut Adam) -> Result<()> {
        let step = *self
            .meta
            .optimizer_steps
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer `{name}`")))?;
        let n = opt.state.first.len();
        let mut state = AdamState { step, first: Vec::with_capacity(n), second: Vec::with_capacity(n) };
        for i in 0..n {
            for kind in ["m", "v"] {
                let key = format!("adam.{name}.{kind}.{i}");
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if kind == "m" {
                    state.first.push(t.data.clone());
                } else {
                    state.second.push(t.data.clone());
                }
            }
        }
        opt.restore(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let tmp = tmp_path(path);
        let io = |e| Error::io(&tmp, e);
        {
            let file = std::fs::File::create(&tmp).map_err(io)?;
            let mut w = std::io::BufWriter::new(file);
            w.write_all(MAGIC).map_err(io)?;
            w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
            w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
            w.write_all(&json).map_err(io)?;
            for t in self.tensors.values() {
                for v in &t.data {
                    w.write_f32::<LittleEndian>(*v).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::open(path).map_err(io)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("{}: corrupt header: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let mut data = vec![0f32; shape.iter().product()];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.insert(name, StoredTensor { shape, data });
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}
