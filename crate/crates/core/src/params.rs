//! Named parameter storage, initialization and the binary checkpoint format.
//!
//! Checkpoint layout (little endian):
//! `b"BARQ"`, `u32` version, `u32` array count, then per array
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values.
//! Arrays appear in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, Tensor};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"BARQ";
const VERSION: u32 = 1;

/// Trainable parameters plus non-trainable buffers, addressed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    buffers: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name (a construction bug).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name) && !self.buffers.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_full(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::full(&[rows, cols], F::lit(v)))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "buffer shadows parameter {name}");
        self.buffers.insert(name, value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<F>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.buffers.get_mut(name)
    }

    /// Total number of trainable scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All trainable scalars in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn sorted_arrays(&self) -> BTreeMap<&str, &Tensor<F>> {
        let mut all: BTreeMap<&str, &Tensor<F>> = BTreeMap::new();
        for (n, t) in self.names.iter().zip(&self.values) {
            all.insert(n, t);
        }
        for (n, t) in &self.buffers {
            all.insert(n, t);
        }
        all
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let arrays = self.sorted_arrays();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, t) in arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    /// Overwrites every parameter and buffer from a checkpoint. The checkpoint
    /// must contain exactly the same names and shapes.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let arrays = read_checkpoint(r)?;
        let expected = self.sorted_arrays();
        if arrays.len() != expected.len() || !arrays.keys().map(String::as_str).eq(expected.keys().copied()) {
            return Err(Error::Format("checkpoint arrays do not match the model".into()));
        }
        for (name, t) in &arrays {
            if expected[name.as_str()].shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
        }
        for (name, t) in arrays {
            let t = t.cast::<F>();
            if let Some(id) = self.id(&name) {
                self.values[id] = t;
            } else {
                self.buffers.insert(name, t);
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a checkpoint into named `f64` arrays.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor<f64>>> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
