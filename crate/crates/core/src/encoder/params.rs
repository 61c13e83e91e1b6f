//! Flat parameter storage with per-tensor gradients and momentum buffers.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub velocity: ArrayD<f64>,
}

/// All trainable tensors of one network, in creation order. Creation order is
/// the initialization order, so identical seeds give identical parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor initialized uniformly on (-a, a), a = sqrt(1/fan_in).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound));
        self.push(name.into(), value)
    }

    fn push(&mut self, name: String, value: ArrayD<f64>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        self.tensors.push(ParamTensor {
            name,
            value,
            grad,
            velocity,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0].grad
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Classic momentum step: v <- momentum * v + grad; w <- w - lr * v.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        for t in &mut self.tensors {
            for ((v, g), w) in t
                .velocity
                .iter_mut()
                .zip(t.grad.iter())
                .zip(t.value.iter_mut())
            {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFault(format!(
                    "parameter {} became non-finite",
                    t.name
                )));
            }
        }
        Ok(())
    }

    // Flat scalar access, used by checkpointing and finite-difference tests.

    pub fn flat_len(&self) -> usize {
        self.param_count()
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let mut offset = flat;
        for (i, t) in self.tensors.iter().enumerate() {
            if offset < t.value.len() {
                return (i, offset);
            }
            offset -= t.value.len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (t, o) = self.locate(flat);
        self.tensors[t].value.as_slice().unwrap()[o]
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let (t, o) = self.locate(flat);
        self.tensors[t].value.as_slice_mut().unwrap()[o] = value;
    }

    pub fn grad_flat(&self, flat: usize) -> f64 {
        let (t, o) = self.locate(flat);
        self.tensors[t].grad.as_slice().unwrap()[o]
    }

    pub fn flat_name(&self, flat: usize) -> String {
        let (t, o) = self.locate(flat);
        format!("{}[{o}]", self.tensors[t].name)
    }

    /// Write all values in the documented binary checkpoint format:
    /// magic "CSNET\0", u32 version, u32 tensor count, then per tensor a
    /// u16 name length + utf8 name, u8 ndim, u32 dims, f64 little-endian data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(b"CSNET\0")?;
        file.write_all(&1u32.to_le_bytes())?;
        file.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            file.write_all(&(name.len() as u16).to_le_bytes())?;
            file.write_all(name)?;
            file.write_all(&[t.value.ndim() as u8])?;
            for &d in t.value.shape() {
                file.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.value.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load values written by [`ParamStore::save`] into matching tensors.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 6];
        file.read_exact(&mut magic)?;
        if &magic != b"CSNET\0" {
            return Err(Error::format(path.display().to_string(), "bad magic"));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(Error::format(path.display().to_string(), "unsupported version"));
        }
        file.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count != self.tensors.len() {
            return Err(Error::ShapeMismatch {
                what: "checkpoint tensors".into(),
                expected: self.tensors.len().to_string(),
                got: count.to_string(),
            });
        }
        for t in &mut self.tensors {
            let mut u16buf = [0u8; 2];
            file.read_exact(&mut u16buf)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            file.read_exact(&mut name)?;
            let name = String::from_utf8_lossy(&name);
            if name != t.name {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("tensor {} does not match expected {}", name, t.name),
                ));
            }
            let mut ndim = [0u8; 1];
            file.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                file.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            if shape != t.value.shape() {
                return Err(Error::ShapeMismatch {
                    what: format!("checkpoint tensor {}", t.name),
                    expected: format!("{:?}", t.value.shape()),
                    got: format!("{shape:?}"),
                });
            }
            for v in t.value.iter_mut() {
                let mut b = [0u8; 8];
                file.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(())
    }
}
