//! Named parameter groups and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "SRLCKPT1"
//! repeated until EOF, once per parameter group in insertion order:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32
//!   dims      rank × u64
//!   values    product(dims) × f64, row-major
//! ```

use std::collections::HashMap;
use std::io::{self, Read, Write};

use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRLCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable group. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.tensors[id.0];
        t.requires_grad = trainable;
        if !trainable {
            t.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Resets every trainable gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                match &mut t.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => t.grad = Some(vec![0.0; t.numel()]),
                }
            }
        }
    }

    /// Adds tape gradients into the per-parameter buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for t in self.tensors.iter_mut() {
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            if !t.requires_grad {
                continue;
            }
            let buf = t.grad.as_mut().expect("initialized above");
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a checkpoint into a fresh store; every group is trainable.
    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| TensorError::Checkpoint("truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let mut params = Params::new();
        while let Some(name_len) = read_u32_or_eof(&mut r)? {
            let mut name = vec![0u8; name_len as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Checkpoint("non-UTF-8 group name".into()))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "dims")?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut raw = vec![0u8; numel * 8];
            read_exact(&mut r, &mut raw, "values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(dims, values)
                .map_err(|e| TensorError::Checkpoint(format!("group `{name}`: {e}")))?;
            params.add(name, tensor)?;
        }
        Ok(params)
    }

    /// Overwrites values of matching groups from a checkpoint. Every group
    /// in `self` must be present with an identical shape.
    pub fn load_into<R: Read>(&mut self, r: R) -> Result<()> {
        let loaded = Params::load(r)?;
        self.copy_values_from(&loaded)
    }

    pub fn copy_values_from(&mut self, other: &Params) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing group `{name}`")))?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "group `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| TensorError::Checkpoint(format!("truncated {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u32_or_eof<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(TensorError::Checkpoint("truncated name length".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Params::new();
        p.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            p.add("a", Tensor::zeros(&[1])),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn layout_is_documented_bytes() {
        let mut p = Params::new();
        p.add("w", Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap())
            .unwrap();
        let bytes = p.to_bytes();
        let mut expected = b"SRLCKPT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut p = Params::new();
        p.add("w", Tensor::zeros(&[3])).unwrap();
        let bytes = p.to_bytes();
        assert!(Params::load(&bytes[..bytes.len() - 1]).is_err());
        assert!(Params::load(&b"SRLCKPT0"[..]).is_err());
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut a = Params::new();
        a.add("w", Tensor::zeros(&[2])).unwrap();
        let mut b = Params::new();
        b.add("w", Tensor::zeros(&[3])).unwrap();
        assert!(a.load_into(&b.to_bytes()[..]).is_err());
    }
}
