//! Named parameter storage with trainable flags, graph binding, and the
//! binary weight checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `ZEGW`, format version u32,
//! parameter count u32, then per parameter: name length u32, name bytes,
//! rank u32, extents u32[rank], f32 payload; finally a config echo block as
//! length u32 + UTF-8 bytes (may be empty).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::value::Value;

pub const WEIGHT_MAGIC: &[u8; 4] = b"ZEGW";
pub const WEIGHT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Value,
    trainable: bool,
}

/// Ordered collection of named parameters. Registration order is the binding
/// and serialization order, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Value, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Value {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Value) {
        debug_assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = value;
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Value {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Bind every parameter into a graph as a leaf; trainable flags carry over.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        BoundParams {
            tensors: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    /// Exact bit patterns of all frozen parameters, for freeze-invariance checks.
    pub fn frozen_snapshot(&self) -> Vec<(String, Vec<u64>)> {
        self.entries
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| {
                (
                    e.name.clone(),
                    e.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    /// Round every parameter through f32, matching checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.round_to_f32();
        }
    }

    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHT_MAGIC);
        buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &ext in e.value.shape() {
                buf.extend_from_slice(&(ext as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_echo.as_bytes());
        write_atomic(path, &buf)
    }

    /// Load a checkpoint into a standalone store (all parameters frozen until
    /// a regime is applied). Returns the config echo.
    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let bytes = std::fs::read(path)?;
        let mut rd = Cursor::new(path, &bytes);
        rd.expect_magic(WEIGHT_MAGIC)?;
        let version = rd.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::BadVersion {
                path: rd.path(),
                found: version,
                supported: WEIGHT_VERSION,
            });
        }
        let n = rd.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = rd.string()?;
            let rank = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(rd.f32()? as f64);
            }
            store.register(&name, Value::new(shape, data)?, false)?;
        }
        let config = rd.string()?;
        Ok((store, config))
    }

    /// Overwrite this store's values from a loaded checkpoint. Every name must
    /// exist with the same shape on both sides.
    pub fn load_into(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter count {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for (i, e) in other.entries.iter().enumerate() {
            let mine = &mut self.entries[i];
            if mine.name != e.name || mine.value.shape() != e.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} `{}` {:?} vs `{}` {:?}",
                    i,
                    e.name,
                    e.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
            mine.value = e.value.clone();
        }
        Ok(())
    }
}

/// Tensors for one graph, aligned with the store's registration order.
pub struct BoundParams {
    tensors: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

impl std::ops::Index<ParamId> for BoundParams {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Write via a temp file and rename, so partially written files never appear.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Little-endian reader with file-format error reporting.
pub(crate) struct Cursor<'a> {
    path: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(path: &Path, bytes: &'a [u8]) -> Self {
        Cursor {
            path: path.display().to_string(),
            bytes,
            pos: 0,
        }
    }

    pub(crate) fn path(&self) -> String {
        self.path.clone()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptFile {
                path: self.path.clone(),
                reason: format!("need {} bytes at offset {}", n, self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: String::from_utf8_lossy(magic).to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::CorruptFile {
            path: self.path.clone(),
            reason: "invalid UTF-8 in string record".into(),
        })
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
