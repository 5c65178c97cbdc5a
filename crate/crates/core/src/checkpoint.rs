//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BWDCKPT\0"  magic
//! u32          format version (1)
//! u8           element width in bytes (4 or 8)
//! u32 + bytes  JSON metadata (model spec, settings, trainer state)
//! u32          layer count
//! per layer:   u8 kind (0 fc, 1 conv), weight (u32 rows, u32 cols, values),
//!              bias (u32 len, values), then the same for its momentum buffer
//! [u8; 32]     SHA-256 of everything above
//! ```
//!
//! A JSON sidecar with the same metadata is written next to the binary file
//! for inspection; loading only reads the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dropout::RngState;
use crate::error::{Error, Result};
use crate::netconv::{ConvNetSpec, LayerDesc};
use crate::netfc::NetSpec;
use crate::optim::OptimizerState;
use crate::params::Layer;
use crate::tensor::{Element, Matrix, Precision, Summation};
use crate::train::{TrainSettings, TrainerState};

const MAGIC: &[u8; 8] = b"BWDCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Fc(NetSpec),
    Conv(ConvNetSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Fc(s) => s.validate(),
            ModelSpec::Conv(s) => s.validate(),
        }
    }

    /// 0 for fully-connected layers, 1 for convolutions, in weight-layer order.
    fn layer_kinds(&self) -> Vec<u8> {
        match self {
            ModelSpec::Fc(s) => vec![0; s.layers()],
            ModelSpec::Conv(s) => s
                .layers
                .iter()
                .filter_map(|l| match l {
                    LayerDesc::Conv { .. } => Some(1),
                    LayerDesc::Fc { .. } => Some(0),
                    LayerDesc::MaxPool => None,
                })
                .collect(),
        }
    }
}

/// Trainer position in a JSON-friendly form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedState {
    pub epoch: usize,
    /// Decimal string; JSON numbers cannot hold every `u128`.
    pub mults: String,
    pub mask_rngs: Vec<SavedRng>,
    pub shuffle: SavedRng,
    pub bank_cursor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedRng {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
    pub word_pos_high: u64,
}

impl From<RngState> for SavedRng {
    fn from(s: RngState) -> Self {
        SavedRng { seed: s.seed, stream: s.stream, word_pos: s.word_pos as u64, word_pos_high: (s.word_pos >> 64) as u64 }
    }
}

impl From<SavedRng> for RngState {
    fn from(s: SavedRng) -> Self {
        RngState { seed: s.seed, stream: s.stream, word_pos: (s.word_pos_high as u128) << 64 | s.word_pos as u128 }
    }
}

impl From<&TrainerState> for SavedState {
    fn from(s: &TrainerState) -> Self {
        SavedState {
            epoch: s.epoch,
            mults: s.mults.to_string(),
            mask_rngs: s.mask_rngs.iter().copied().map(SavedRng::from).collect(),
            shuffle: s.shuffle.into(),
            bank_cursor: s.bank_cursor,
        }
    }
}

impl SavedState {
    pub fn to_trainer_state(&self) -> Result<TrainerState> {
        Ok(TrainerState {
            epoch: self.epoch,
            mults: self.mults.parse().map_err(|_| Error::Integrity(format!("bad multiplication count {:?}", self.mults)))?,
            mask_rngs: self.mask_rngs.iter().copied().map(RngState::from).collect(),
            shuffle: self.shuffle.into(),
            bank_cursor: self.bank_cursor,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub settings: TrainSettings,
    pub seed: u64,
    pub precision: Precision,
    pub summation: Summation,
    pub state: SavedState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub layers: Vec<Layer<T>>,
    pub optimizer: OptimizerState<T>,
}

/// Path of the JSON sidecar for a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit a checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_layer<T: Element>(out: &mut Vec<u8>, layer: &Layer<T>) -> Result<()> {
    put_u32(out, layer.weight.rows())?;
    put_u32(out, layer.weight.cols())?;
    for &v in layer.weight.as_slice() {
        v.write_le(out);
    }
    put_u32(out, layer.bias.len())?;
    for &v in &layer.bias {
        v.write_le(out);
    }
    Ok(())
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.meta.precision != T::PRECISION {
            return Err(Error::Config("checkpoint precision does not match its element type".into()));
        }
        let kinds = self.meta.model.layer_kinds();
        if kinds.len() != self.layers.len() || self.optimizer.velocity.len() != self.layers.len() {
            return Err(Error::Config("checkpoint layers do not match the model spec".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let json = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, self.layers.len())?;
        for ((layer, vel), kind) in self.layers.iter().zip(&self.optimizer.velocity).zip(kinds) {
            out.push(kind);
            put_layer(&mut out, layer)?;
            put_layer(&mut out, vel)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verified_body(bytes)?;
        if body[12] as usize != T::BYTES {
            return Err(Error::Integrity(format!("stored element width {} differs from the requested {}", body[12], T::BYTES)));
        }
        let mut r = Reader { bytes: body, pos: 13 };
        let json_len = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
        let kinds = meta.model.layer_kinds();
        let count = r.u32()?;
        if count != kinds.len() {
            return Err(Error::Integrity(format!("{count} stored layers for a {}-layer model", kinds.len())));
        }
        let mut layers = Vec::with_capacity(count);
        let mut velocity = Vec::with_capacity(count);
        for &kind in &kinds {
            if r.take(1)?[0] != kind {
                return Err(Error::Integrity("layer kind tag does not match the model spec".into()));
            }
            layers.push(r.layer()?);
            velocity.push(r.layer()?);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes before the digest".into()));
        }
        Ok(Checkpoint { meta, layers, optimizer: OptimizerState { velocity } })
    }

    /// Writes the binary checkpoint and its JSON sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(format!("writing {}", side.display()), e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 + 4 + 1 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("digest mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported format version {version}")));
    }
    Ok(body)
}

/// Precision of a stored checkpoint, after verifying its digest.
pub fn stored_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    match verified_body(&bytes)?[12] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Integrity(format!("element width {w}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Integrity("checkpoint ends early".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn values<T: Element>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn layer<T: Element>(&mut self) -> Result<Layer<T>> {
        let (rows, cols) = (self.u32()?, self.u32()?);
        let weight = Matrix::from_vec(rows, cols, self.values(rows * cols)?)?;
        let len = self.u32()?;
        let bias = self.values(len)?;
        Ok(Layer { weight, bias })
    }
}
