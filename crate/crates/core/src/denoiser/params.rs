//! Named parameter tensors, the Adam optimizer and checkpoint files.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Parameters in insertion order with lookup by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if tensor.shape.len() > 4 || tensor.value.len() != tensor.shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("tensor {} has an inconsistent shape", tensor.name)));
        }
        if self.index.contains_key(&tensor.name) {
            return Err(invalid(format!("duplicate parameter {}", tensor.name)));
        }
        self.index.insert(tensor.name.clone(), self.tensors.len());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownName {
            kind: "parameter",
            name: name.to_string(),
            available: String::new(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn quantize(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.value {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |_: &Tensor| Vec::new();
        Self {
            config,
            step: 0,
            m: params.tensors.iter().map(zeros).collect(),
            v: params.tensors.iter().map(zeros).collect(),
        }
    }

    /// Applies one update; tensors without a gradient are left unchanged.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                t.value[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVDC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes magic, version, the JSON config block and every tensor as `f32`.
pub fn write_checkpoint<W: Write, C: Serialize>(config: &C, params: &ParamStore, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    let json = serde_json::to_vec(config)?;
    write_u32(&mut out, json.len() as u32)?;
    out.write_all(&json)?;
    write_u32(&mut out, params.tensors.len() as u32)?;
    for t in &params.tensors {
        write_u32(&mut out, t.name.len() as u32)?;
        out.write_all(t.name.as_bytes())?;
        write_u32(&mut out, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u32(&mut out, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.value.len() * 4);
        for &v in &t.value {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read, C: DeserializeOwned>(mut input: R) -> Result<(C, ParamStore)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an MVDD checkpoint".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let config: C = serde_json::from_slice(&json)?;
    let count = read_u32(&mut input)?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        input.read_exact(&mut bytes)?;
        let value = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(Tensor { name, shape, value })?;
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::default();
        p.insert(Tensor {
            name: "w".into(),
            shape: vec![2],
            value: vec![1.0, -1.0],
        })
        .unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.update(&mut p, &[Some(vec![0.5, -3.0])]);
        assert!((p.tensors[0].value[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((p.tensors[0].value[1] - (-1.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamStore::default();
        p.insert(Tensor {
            name: "a.w".into(),
            shape: vec![2, 1, 1, 3],
            value: vec![0.5, 1.25, -2.0, 3.0, 0.0, 1e-3],
        })
        .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&serde_json::json!({"levels": 3}), &p, &mut buf).unwrap();
        let (cfg, back): (serde_json::Value, _) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(cfg["levels"], 3);
        let mut q = p.clone();
        q.quantize();
        assert_eq!(back, q);
        assert!(p.insert(p.tensors[0].clone()).is_err());
    }
}
