//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters addressed by dotted names such as
/// `unet.enc1.spatial.weight` or `adapter.block2.head.bias`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter, replacing the value of an existing one with the same name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&id) = self.by_name.get(&name) {
            let p = &mut self.params[id];
            p.grad = Tensor::zeros(value.shape());
            p.value = value;
            return id;
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: true,
        });
        id
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id];
        p.grad.expect_shape("accumulate_grad", grad.shape())?;
        for (a, b) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
        Ok(())
    }

    /// FNV-1a over names and raw value bits of parameters matching `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Scalar count per top-level module prefix (text before the first `.`).
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let top = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(n, _)| *n == top) {
                Some((_, c)) => *c += p.value.numel(),
                None => out.push((top, p.value.numel())),
            }
        }
        out
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// `(C_out, C_in, 1, k, k)` kernel, uniform in `±1/sqrt(C_in*k*k)`.
pub fn init_conv2d(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
    Tensor::uniform(Shape::new(c_out, c_in, 1, k, k), bound, rng)
}

/// `(C_out, C_in, kt, 1, 1)` kernel, uniform in `±1/sqrt(C_in*kt)`.
pub fn init_temporal(rng: &mut impl Rng, c_out: usize, c_in: usize, kt: usize) -> Tensor {
    let bound = 1.0 / ((c_in * kt) as f32).sqrt();
    Tensor::uniform(Shape::new(c_out, c_in, kt, 1, 1), bound, rng)
}

pub fn channel_vector(c: usize, value: f32) -> Tensor {
    Tensor::full(Shape::new(c, 1, 1, 1, 1), value)
}
