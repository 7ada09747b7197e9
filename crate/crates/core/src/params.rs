//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers `u32` little-endian, values `f64` little-endian):
//!
//! ```text
//! "AMMLCKPT1"
//! repeated until end of file:
//!     name_len, name (UTF-8), rank, extents[rank], values[product(extents)]
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"AMMLCKPT1";

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Policy,
    Recognition,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("policy.") {
            Some(ParamGroup::Policy)
        } else if name.starts_with("recog.") {
            Some(ParamGroup::Recognition)
        } else {
            None
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn group_of(&self, index: usize) -> Option<ParamGroup> {
        self.entries.get_index(index).and_then(|(name, _)| ParamGroup::of(name))
    }

    /// Total number of scalar values in the selected groups.
    pub fn num_values(&self, groups: &[ParamGroup]) -> usize {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Concatenated values of the selected groups, in store order.
    pub fn flatten(&self, groups: &[ParamGroup]) -> Vec<f64> {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, groups: &[ParamGroup], values: &[f64]) -> Result<()> {
        let expected = self.num_values(groups);
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} flat values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for (name, t) in self.entries.iter_mut() {
            if ParamGroup::of(name).is_some_and(|g| groups.contains(&g)) {
                let n = t.numel();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// FNV-1a hash over names and value bits of one group.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            if ParamGroup::of(name) == Some(group) {
                eat(name.as_bytes());
                for v in t.data() {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    /// Places every parameter on `g`; only groups accepted by `trainable` require gradient.
    pub fn bind<'s, 'g>(&'s self, g: &'g Graph, trainable: impl Fn(ParamGroup) -> bool) -> BoundParams<'s, 'g> {
        let vars = self
            .iter()
            .map(|(name, t)| {
                let train = ParamGroup::of(name).is_some_and(&trainable);
                g.leaf(t.clone(), train)
            })
            .collect();
        BoundParams { store: self, vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad checkpoint magic".into(),
            });
        }
        let mut store = ParamStore::new();
        while !r.at_end() {
            let name_at = r.offset();
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    reason: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank_at = r.offset();
            let rank = r.u32("rank")? as usize;
            if rank == 0 {
                return Err(Error::Format {
                    offset: rank_at,
                    reason: format!("parameter {name} has rank 0"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.offset();
                let e = r.u32("extent")? as usize;
                if e == 0 {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("parameter {name} has a zero extent"),
                    });
                }
                shape.push(e);
            }
            let numel: usize = shape.iter().product();
            let values = r.f64s(numel, "values")?;
            if store.contains(&name) {
                return Err(Error::Format {
                    offset: name_at,
                    reason: format!("duplicate parameter {name}"),
                });
            }
            store.insert(name, Tensor::new(shape, values)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        ParamStore::from_bytes(&std::fs::read(path)?)
    }
}

/// A [`ParamStore`] placed on a graph.
pub struct BoundParams<'s, 'g> {
    store: &'s ParamStore,
    vars: Vec<Var<'g>>,
}

impl<'s, 'g> BoundParams<'s, 'g> {
    pub fn var(&self, name: &str) -> Result<Var<'g>> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
    }

    /// Substitutes `var` for the named parameter, e.g. to differentiate with respect to one tensor.
    pub fn replace(&mut self, name: &str, var: Var<'g>) -> Result<()> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?;
        if var.shape() != self.store.get(name).expect("indexed").shape() {
            return Err(Error::Dimension(format!("replacement for {name} has the wrong shape")));
        }
        self.vars[i] = var;
        Ok(())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients after backward, aligned with store order; `None` where no gradient reached.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.grad().map(Tensor::into_data)).collect()
    }
}

/// Little-endian cursor that reports the failing offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
