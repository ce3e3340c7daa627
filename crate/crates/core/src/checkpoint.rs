//! `UCKP` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UCKP" | version: u32 | meta_len: u64 | meta: UTF-8 JSON
//! repeated until EOF:
//!   name_len: u32 | name | dtype: u8 (0 = f32) | rank: u32 | dims: u64 × rank | payload
//! ```
//!
//! Records are written in name order, so saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterMeta, AdapterSet};
use crate::denoiser::{DenoiserConfig, JointDenoiser};
use crate::error::{Error, Result};
use crate::nn::{hex, Params};
use crate::scalar::Scalar;
use crate::schedule::ScheduleParams;

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub base_fingerprint: String,
    #[serde(default)]
    pub adapter: Option<AdapterMeta>,
    /// Free-form training record (stage, steps, seed, final loss, data spec).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Array2<f32>>,
}

fn to_f32<F: Scalar>(p: &Params<F>) -> BTreeMap<String, Array2<f32>> {
    p.iter()
        .map(|(k, v)| (k.clone(), v.mapv(|x| x.as_f64() as f32)))
        .collect()
}

fn from_f32<F: Scalar>(t: &BTreeMap<String, Array2<f32>>) -> Params<F> {
    let mut p = Params::new();
    for (k, v) in t {
        p.insert(k.clone(), v.mapv(|x| F::lit(x as f64)));
    }
    p
}

fn is_adapter_tensor(name: &str) -> bool {
    name.contains(".lora_") || name.contains(".joint.proj_out")
}

impl Checkpoint {
    pub fn from_base<F: Scalar>(model: &JointDenoiser<F>, provenance: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Base,
                model: model.config().clone(),
                schedule: model.schedule().params().clone(),
                base_fingerprint: model.base().fingerprint(),
                adapter: None,
                provenance,
            },
            tensors: to_f32(model.base()),
        }
    }

    pub fn from_adapter<F: Scalar>(
        model: &JointDenoiser<F>,
        set: &AdapterSet<F>,
        provenance: serde_json::Value,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Adapter,
                model: model.config().clone(),
                schedule: model.schedule().params().clone(),
                base_fingerprint: set.meta.base_fingerprint.clone(),
                adapter: Some(set.meta.clone()),
                provenance,
            },
            tensors: to_f32(&set.tensors()),
        }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    pub fn to_model<F: Scalar>(&self) -> Result<JointDenoiser<F>> {
        self.expect_kind(CheckpointKind::Base)?;
        JointDenoiser::from_parts(self.meta.model.clone(), &self.meta.schedule, from_f32(&self.tensors))
    }

    pub fn to_adapter_set<F: Scalar>(&self) -> Result<AdapterSet<F>> {
        self.expect_kind(CheckpointKind::Adapter)?;
        let meta = self
            .meta
            .adapter
            .clone()
            .ok_or_else(|| Error::Checkpoint("adapter checkpoint without adapter metadata".into()))?;
        AdapterSet::from_tensors(meta, &from_f32(&self.tensors))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = cur.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut tensors = BTreeMap::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
            }
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
            };
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
            let payload = cur.take(count * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).expect("sized payload");
            if meta.kind == CheckpointKind::Adapter && !is_adapter_tensor(&name) {
                return Err(Error::Checkpoint(format!("adapter checkpoint holds base tensor {name}")));
            }
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized file.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
