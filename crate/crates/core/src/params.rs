//! Named trainable parameters, their initialization, and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"CVT1"
//! repeated until EOF:
//!     u32   name length in bytes
//!     [u8]  UTF-8 name
//!     u32   rank
//!     u64   extent, `rank` times
//!     f64   payload, product(extents) values, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Writes every parameter, in registration order, as an f64 checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 * self.num_scalars() + 64 * self.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let records = read_checkpoint(path)?;
        let mut problems = Vec::new();
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in &records {
            match self.id(name) {
                None => problems.push(format!("unexpected parameter {name}")),
                Some(id) => {
                    seen[id.0] = true;
                    let want = self.params[id.0].value.shape();
                    if want != tensor.shape() {
                        problems.push(format!("{name}: shape {:?} vs {:?}", tensor.shape(), want));
                    }
                }
            }
        }
        for (p, s) in self.params.iter().zip(&seen) {
            if !s {
                problems.push(format!("missing parameter {}", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for (name, tensor) in records {
            let id = self.by_name[&name];
            self.params[id.0].value = tensor.cast();
        }
        Ok(())
    }
}

/// Parses a checkpoint into `(name, tensor)` records in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(cur.error("bad magic, expected CVT1"));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| cur.error("parameter name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        if rank == 0 {
            return Err(cur.error("rank 0 tensor"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Seeded generator used for every weight initialization.
pub type InitRng = Xoshiro256PlusPlus;

pub fn init_rng(seed: u64) -> InitRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Uniform in `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(rng: &mut InitRng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
}
