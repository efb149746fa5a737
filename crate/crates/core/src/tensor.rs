//! Five-axis `(batch, channels, frames, height, width)` tensor of `f32`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Extents of a [`Tensor`], ordered `(batch, channels, frames, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            frames,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.frames, self.height, self.width]
    }

    pub fn from_dims(d: [usize; 5]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3], d[4])
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Elements in one `height x width` plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Number of `height x width` planes.
    pub fn planes(&self) -> usize {
        self.batch * self.channels * self.frames
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub fn with_spatial(self, height: usize, width: usize) -> Self {
        Shape {
            height,
            width,
            ..self
        }
    }

    pub fn is_valid(&self) -> bool {
        self.dims().iter().all(|&d| d >= 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.batch, self.channels, self.frames, self.height, self.width
        )
    }
}

/// Dense row-major tensor. The carrier for videos, latents, noise, flow
/// fields, features, and parameters.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::invalid("tensor", format!("every extent must be >= 1, got {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("data length {} does not match shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        assert!(shape.is_valid(), "invalid shape {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 5]) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let mut i = 0;
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for fr in 0..shape.frames {
                    for y in 0..shape.height {
                        for x in 0..shape.width {
                            t.data[i] = f([b, c, fr, y, x]);
                            i += 1;
                        }
                    }
                }
            }
        }
        t
    }

    pub fn randn(shape: Shape, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: Shape, bound: f32, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { shape, data }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let s = self.shape;
        (((idx[0] * s.channels + idx[1]) * s.frames + idx[2]) * s.height + idx[3]) * s.width + idx[4]
    }

    pub fn get(&self, idx: [usize; 5]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: f32) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Same data, new extents with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_shape(op, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum of all elements, accumulated in `f64` in row-major order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, other: Shape) -> Result<()> {
        if self.shape != other {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other,
            });
        }
        Ok(())
    }

    /// Cyclic shift of the width axis: `out[.., j] = in[.., (j + k) mod width]`.
    pub fn roll_columns(&self, k: isize) -> Tensor {
        let w = self.shape.width;
        let k = k.rem_euclid(w as isize) as usize;
        if k == 0 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            out.extend_from_slice(&row[k..]);
            out.extend_from_slice(&row[..k]);
        }
        Tensor {
            shape: self.shape,
            data: out,
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors to stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batch = 0;
        for t in items {
            let ts = t.shape;
            if (Shape { batch: s.batch, ..ts }) != s {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: s,
                    right: ts,
                });
            }
            batch += ts.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape { batch, ..s }, data)
    }

    /// The `index`th batch element as a batch-1 tensor.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let s = Shape { batch: 1, ..self.shape };
        let n = s.numel();
        Tensor {
            shape: s,
            data: self.data[index * n..(index + 1) * n].to_vec(),
        }
    }

    /// The `frame`th frame of batch element `b` as a `(channels, height, width)` slab.
    pub fn frame(&self, b: usize, frame: usize) -> Tensor {
        let s = self.shape;
        let out_shape = Shape::new(1, s.channels, 1, s.height, s.width);
        let mut data = Vec::with_capacity(out_shape.numel());
        for c in 0..s.channels {
            let o = self.offset([b, c, frame, 0, 0]);
            data.extend_from_slice(&self.data[o..o + s.plane()]);
        }
        Tensor {
            shape: out_shape,
            data,
        }
    }
}
