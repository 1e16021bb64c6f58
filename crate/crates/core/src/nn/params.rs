use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Batch-norm moving statistics are stored but not trained.
    pub trainable: bool,
}

/// Ordered registry of named tensors, keyed by stable layer paths such as
/// `stream_rgb/clstm_2/w_xi`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.as_str())
    }

    /// (trainable, total) scalar counts.
    pub fn count(&self) -> (usize, usize) {
        self.entries.values().fold((0, 0), |(t, a), e| {
            let n = e.tensor.len();
            (t + if e.trainable { n } else { 0 }, a + n)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            e.tensor.write_to(w)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; every entry is marked trainable. Use
    /// [`ParamStore::load_into`] to restore values into a built model.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
        let fmt = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| fmt(e.to_string()))?;
        if &b4 != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad magic {b4:?}")));
        }
        r.read_exact(&mut b4).map_err(|e| fmt(e.to_string()))?;
        let count = u32::from_le_bytes(b4);
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            r.read_exact(&mut b4).map_err(|e| fmt(e.to_string()))?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name).map_err(|e| fmt(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| fmt(e.to_string()))?;
            out.push((name, Tensor::read_from(r)?));
        }
        Ok(out)
    }

    /// Overwrite every entry from a checkpoint file. Names and shapes must
    /// match this store exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = Self::read_from(&mut BufReader::new(file))?;
        if entries.len() != self.entries.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} entries, model has {}", entries.len(), self.entries.len()),
            });
        }
        for (name, t) in entries {
            let slot = self.get_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("{name}: shape {:?} vs model {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Graph nodes bound to the trainable parameters of a store for one pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    nodes: IndexMap<String, NodeId>,
}

impl Bound {
    /// Register every trainable entry as a graph parameter.
    pub fn bind(graph: &mut Graph, store: &ParamStore) -> Self {
        let nodes = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| (name.to_string(), graph.param(e.tensor.clone())))
            .collect();
        Self { nodes }
    }

    pub fn from_nodes(nodes: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
        }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_layout() {
        let mut s = ParamStore::new();
        s.insert("stream_rgb/clstm_1/w_xi", Tensor::full(&[1, 1, 2, 3], 0.25), true);
        s.insert("stream_rgb/bn_1/moving_var", Tensor::ones(&[3]), false);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CKPT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 23);
        assert_eq!(&buf[12..35], b"stream_rgb/clstm_1/w_xi");
        assert_eq!(&buf[35..39], b"TNSR");
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "stream_rgb/clstm_1/w_xi");
        assert_eq!(back[1].1, Tensor::ones(&[3]));
        assert_eq!(s.count(), (6, 9));
    }
}
