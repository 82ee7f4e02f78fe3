//! Named parameter storage, the Adam optimizer, and checkpoint I/O.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::graph::GradNode;
use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

/// Versioned checkpoint header.
pub const CKPT_MAGIC: &[u8] = b"naht-mat-ckpt-v1\n";

/// Adam hyperparameters. Defaults: lr 3e-4, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
}

/// All learnable tensors of a model, addressable by name. Iteration order
/// is always sorted by name, which keeps updates and checkpoints
/// deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, GradNode>,
    adam: BTreeMap<String, AdamSlot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, init: Tensor) -> GradNode {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        let shape = init.shape().to_vec();
        let node = GradNode::leaf(init);
        self.params.insert(name.to_string(), node.clone());
        self.adam.insert(
            name.to_string(),
            AdamSlot {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        node
    }

    pub fn get(&self, name: &str) -> Option<&GradNode> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GradNode)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for node in self.params.values() {
            node.zero_grad();
        }
    }

    /// Global L2 norm over all parameter gradients (missing grads count
    /// as zero).
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad().map(|g| g.l2_norm_sq()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for node in self.params.values() {
                if let Some(mut g) = node.grad() {
                    g.scale_assign(scale);
                    node.zero_grad();
                    node.set_grad_raw(g);
                }
            }
        }
        norm
    }

    /// One Adam step with bias correction. Updates parameters in place;
    /// gradients are left untouched for the caller to zero.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, node) in &self.params {
            let grad = node
                .grad()
                .unwrap_or_else(|| Tensor::zeros(&node.shape()));
            let slot = self.adam.get_mut(name).expect("adam slot");
            let mut value = node.value();
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let m = cfg.beta1 * slot.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * slot.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            node.set_value(value);
        }
    }

    /// Overwrite every parameter with zeros (used by tests that pin the
    /// architecture's zero-weight behavior).
    pub fn set_all_zero(&self) {
        for node in self.params.values() {
            node.set_value(Tensor::zeros(&node.shape()));
        }
    }

    // ----- checkpoint I/O --------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        write_u32(&mut buf, self.params.len() as u32);
        for (name, node) in &self.params {
            write_str(&mut buf, name);
            write_tensor(&mut buf, &node.value());
        }
        buf.extend_from_slice(&self.step.to_le_bytes());
        for (name, _) in &self.params {
            let slot = &self.adam[name];
            write_tensor(&mut buf, &slot.m);
            write_tensor(&mut buf, &slot.v);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Load values and optimizer state from a checkpoint into this store.
    /// The set of names and every shape must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<(), NumericsError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let magic = take(&bytes, &mut cursor, CKPT_MAGIC.len())?;
        if magic != CKPT_MAGIC {
            return Err(NumericsError::CheckpointFormat(
                "bad magic; not a naht-mat-ckpt-v1 file".into(),
            ));
        }
        let count = read_u32(&bytes, &mut cursor)? as usize;
        if count != self.params.len() {
            return Err(NumericsError::CheckpointFormat(format!(
                "checkpoint has {count} params, model has {}",
                self.params.len()
            )));
        }
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&bytes, &mut cursor)?;
            let tensor = read_tensor(&bytes, &mut cursor)?;
            loaded.push((name, tensor));
        }
        // Validate everything before mutating anything.
        for (name, tensor) in &loaded {
            match self.params.get(name) {
                None => {
                    return Err(NumericsError::CheckpointFormat(format!(
                        "checkpoint param {name} not present in model"
                    )))
                }
                Some(node) => {
                    if node.shape() != tensor.shape() {
                        return Err(NumericsError::ParamShape {
                            name: name.clone(),
                            expected: node.shape(),
                            got: tensor.shape().to_vec(),
                        });
                    }
                }
            }
        }
        let step = read_u64(&bytes, &mut cursor)?;
        let mut slots: Vec<(String, Tensor, Tensor)> = Vec::with_capacity(count);
        for (name, _) in &loaded {
            let m = read_tensor(&bytes, &mut cursor)?;
            let v = read_tensor(&bytes, &mut cursor)?;
            slots.push((name.clone(), m, v));
        }
        for (name, tensor) in loaded {
            self.params[&name].set_value(tensor);
        }
        self.step = step;
        for (name, m, v) in slots {
            let slot = self.adam.get_mut(&name).expect("adam slot");
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }
}

impl GradNode {
    /// Replace the stored gradient wholesale (gradient clipping).
    pub(crate) fn set_grad_raw(&self, g: Tensor) {
        self.zero_grad();
        self.accumulate_raw(g);
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    write_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        write_u32(buf, d as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, len: usize) -> Result<&'a [u8], NumericsError> {
    if *cursor + len > bytes.len() {
        return Err(NumericsError::CheckpointFormat("truncated file".into()));
    }
    let out = &bytes[*cursor..*cursor + len];
    *cursor += len;
    Ok(out)
}

fn read_u32(bytes: &[u8], cursor: &mut usize) -> Result<u32, NumericsError> {
    let raw = take(bytes, cursor, 4)?;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], cursor: &mut usize) -> Result<u64, NumericsError> {
    let raw = take(bytes, cursor, 8)?;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()))
}

fn read_str(bytes: &[u8], cursor: &mut usize) -> Result<String, NumericsError> {
    let len = read_u32(bytes, cursor)? as usize;
    let raw = take(bytes, cursor, len)?;
    String::from_utf8(raw.to_vec())
        .map_err(|_| NumericsError::CheckpointFormat("non-utf8 param name".into()))
}

fn read_tensor(bytes: &[u8], cursor: &mut usize) -> Result<Tensor, NumericsError> {
    let ndim = read_u32(bytes, cursor)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(bytes, cursor)? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = take(bytes, cursor, numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| NumericsError::CheckpointFormat(e.to_string()))
}
