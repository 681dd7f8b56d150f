//! `IMLN` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "IMLN"
//! version    u32
//! count      u32
//! count × entry:
//!   name_len u32, name UTF-8 bytes
//!   rank     u32, rank × u64 dims
//!   data     product(dims) × f64
//! ```
//!
//! Optimizer state travels as ordinary entries under the `__adam__/` prefix.

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IMLN";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "__adam__/first_moment";
const ADAM_V: &str = "__adam__/second_moment";
const ADAM_STEP: &str = "__adam__/step_count";
const ADAM_HYPER: &str = "__adam__/hyper";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Self {
        let mut entries: Vec<CheckpointEntry> = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        if let Some(st) = adam {
            let flat = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
            let n = st.first_moment.len().max(1);
            let pad = |mut v: Vec<f64>| {
                v.resize(n, 0.0);
                v
            };
            entries.push(CheckpointEntry { name: ADAM_M.into(), shape: vec![n], data: pad(flat(&st.first_moment)) });
            entries.push(CheckpointEntry { name: ADAM_V.into(), shape: vec![n], data: pad(flat(&st.second_moment)) });
            entries.push(CheckpointEntry { name: ADAM_STEP.into(), shape: vec![1], data: vec![st.step_count as f64] });
            entries.push(CheckpointEntry {
                name: ADAM_HYPER.into(),
                shape: vec![4],
                data: vec![st.beta1.as_f64(), st.beta2.as_f64(), st.epsilon.as_f64(), st.learning_rate.as_f64()],
            });
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Overwrite every tensor of `store` with the entry of the same name.
    pub fn restore_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let entry = self
                .get(&name)
                .ok_or_else(|| Error::input(format!("checkpoint lacks parameter {name}")))?;
            if entry.shape != store.value(id).shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    entry.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::from_f64(&entry.shape, &entry.data)?;
        }
        Ok(())
    }

    pub fn adam_state<T: Scalar>(&self, num_params: usize) -> Result<Option<AdamState<T>>> {
        let (Some(m), Some(v), Some(step), Some(hyper)) =
            (self.get(ADAM_M), self.get(ADAM_V), self.get(ADAM_STEP), self.get(ADAM_HYPER))
        else {
            return Ok(None);
        };
        if m.data.len() < num_params || v.data.len() < num_params || hyper.data.len() != 4 {
            return Err(Error::dim("optimizer state does not match parameter count"));
        }
        let h = &hyper.data;
        let mut st = AdamState::new(num_params, T::lit(h[3]), T::lit(h[0]), T::lit(h[1]), T::lit(h[2]))?;
        st.first_moment = m.data[..num_params].iter().map(|&x| T::lit(x)).collect();
        st.second_moment = v.data[..num_params].iter().map(|&x| T::lit(x)).collect();
        st.step_count = step.data[0] as u64;
        Ok(Some(st))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::input("checkpoint entry name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated("tensor size".into()))?, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(CheckpointEntry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::input(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::input(format!("{what} is not UTF-8")))
    }
}
