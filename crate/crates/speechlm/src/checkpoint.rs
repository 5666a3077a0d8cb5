//! Named-tensor checkpoints.
//!
//! Layout: `SLMK`, u32 version (1), u32 tensor count; per tensor a u16 name
//! length, the UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 frozen flag, u8
//! rank, u32 dims, little-endian payload; then a u32-length-prefixed JSON
//! metadata blob.

use std::fs;
use std::path::Path;

use serde_json::Value;
use speechlm_core::{DType, ParamStore, Scalar, Tensor};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"SLMK";
pub const VERSION: u32 = 1;
/// Names under this prefix hold optimizer state, not model weights.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    /// Converts when the element types differ.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub frozen: bool,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, metadata: Value) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                frozen: p.frozen,
                data: TensorData::from_tensor(&p.tensor),
            })
            .collect();
        Self { entries, metadata }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push<T: Scalar>(&mut self, name: String, tensor: &Tensor<T>, frozen: bool) {
        self.entries.push(Entry {
            name,
            frozen,
            data: TensorData::from_tensor(tensor),
        });
    }

    /// Copy every model tensor whose name starts with `prefix` into `store`.
    /// Fails, listing them, when some selected names are not in the store.
    /// Freeze flags stay as the model set them. Returns the count loaded.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        self.load_renamed(store, prefix, prefix)
    }

    /// Like [`Checkpoint::load_into`], but `from.x` lands on `to.x`.
    pub fn load_renamed<T: Scalar>(&self, store: &mut ParamStore<T>, from: &str, to: &str) -> Result<usize> {
        let selected: Vec<&Entry> = self
            .entries
            .iter()
            .filter(|e| e.name.starts_with(from) && !e.name.starts_with(OPTIM_PREFIX))
            .collect();
        let target = |e: &Entry| format!("{to}{}", &e.name[from.len()..]);
        let unknown: Vec<String> = selected
            .iter()
            .filter(|e| store.id(&target(e)).is_none())
            .map(|e| e.name.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownTensors(unknown));
        }
        for e in &selected {
            let id = store.id(&target(e)).expect("checked above");
            store.set_tensor(id, e.data.to_tensor())?;
        }
        Ok(selected.len())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {}", e.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype().code());
            out.push(u8::from(e.frozen));
            let shape = e.data.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.format("bad magic, expected SLMK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.format(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.format("tensor name is not UTF-8"))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.format(&format!("{name}: unknown dtype")))?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(r.format(&format!("{name}: frozen flag {f}"))),
            };
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * dtype.size())?;
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(
                    shape,
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
                )?),
                DType::F64 => TensorData::F64(Tensor::new(
                    shape,
                    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                )?),
            };
            entries.push(Entry { name, frozen, data });
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        if r.at != bytes.len() {
            return Err(r.format("trailing bytes after metadata"));
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.encode()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn format(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.into(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.format(&format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
