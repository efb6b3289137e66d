use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
}

/// Named trainable tensors with their gradients and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step: u64,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
            seed,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Glorot-uniform matrix of shape `[rows, cols]`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Sets every parameter value to zero.
    pub fn zero_values(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().fill(0.0);
        }
    }

    /// `grad += scale * g` for each pair.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor)], scale: f64) {
        for (id, g) in grads {
            self.entries[id.0].grad.add_scaled(g, scale);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                for g in e.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        norm
    }

    pub(crate) fn adam_parts(
        &mut self,
        id: ParamId,
    ) -> (&mut Tensor, &Tensor, &mut Tensor, &mut Tensor) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.adam_m, &mut e.adam_v)
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AOMC";
const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor_data(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes a checkpoint: magic `AOMC`, u32 version, u64 seed, u64 step,
/// length-prefixed UTF-8 metadata, u32 parameter count, then per parameter
/// its name, rank, dims, and value / adam_m / adam_v as little-endian f64.
pub fn write_checkpoint(w: &mut impl Write, store: &ParameterStore, metadata: &str) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u64(w, store.seed)?;
    write_u64(w, store.step)?;
    write_u32(w, metadata.len() as u32)?;
    w.write_all(metadata.as_bytes())?;
    write_u32(w, store.entries.len() as u32)?;
    for e in &store.entries {
        write_u32(w, e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        write_u32(w, e.value.shape().len() as u32)?;
        for &d in e.value.shape() {
            write_u64(w, d as u64)?;
        }
        write_tensor_data(w, &e.value)?;
        write_tensor_data(w, &e.adam_m)?;
        write_tensor_data(w, &e.adam_v)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`]. Gradients start at
/// zero.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParameterStore, String)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = read_u64(r)?;
    let step = read_u64(r)?;
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata =
        String::from_utf8(meta).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let count = read_u32(r)? as usize;
    let mut store = ParameterStore::new(seed);
    store.step = step;
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), read_f64s(r, n)?)?;
        let m = Tensor::new(shape.clone(), read_f64s(r, n)?)?;
        let v = Tensor::new(shape, read_f64s(r, n)?)?;
        let id = store.insert(&name, value)?;
        store.entries[id.0].adam_m = m;
        store.entries[id.0].adam_v = v;
    }
    Ok((store, metadata))
}
