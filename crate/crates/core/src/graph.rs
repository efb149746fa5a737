//! Reverse-mode autodiff over a linear tape of tensor operations.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! copy their value out of a [`ParamStore`]; [`Graph::backward`] replays the
//! tape in reverse and returns gradients for trainable parameters and for
//! inputs created with [`Graph::input_with_grad`]. Nodes that cannot reach a
//! trainable leaf are skipped, so frozen sub-networks cost only the adjoint
//! of their activations, never their weight gradients.

use crate::error::{Error, Result};
use crate::ops::conv::{
    conv2d_grad_input, conv2d_grad_params, temporal_conv_grad_input, temporal_conv_grad_params,
};
use crate::ops::norm::{channel_norm_backward, NormStats};
use crate::ops::reshape::upsample2_backward;
use crate::ops::{self, PadMode};
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: PadMode,
    },
    Temporal {
        x: Var,
        k: Var,
        b: Option<Var>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Silu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Upsample2(Var),
    Unshuffle(Var, usize),
    LatitudeMse {
        pred: Var,
        target: Tensor,
        row_weights: Vec<f32>,
    },
    SumSquares(Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    /// Exact `f64` value for scalar reductions.
    scalar: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    /// `(parameter id, gradient)` for every trainable parameter reached.
    pub params: Vec<(usize, Tensor)>,
    inputs: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }

    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| *k == id).map(|(_, t)| t)
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Scalar value of a one-element node; reductions report their `f64` sum.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar.unwrap_or_else(|| n.value.data()[0] as f64)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        let p = store.by_id(id);
        Ok(self.push(p.value.clone(), Op::Param(id), p.trainable))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: PadMode) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, k, b, stride, pad }, rg))
    }

    pub fn temporal_conv(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::temporal_conv(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Temporal { x, k, b }, rg))
    }

    pub fn pseudo3d_pair(&mut self, x: Var, spatial: Var, temporal: Var, pad: PadMode) -> Result<Var> {
        let c = self.value(x).shape().channels;
        let ss = self.value(spatial).shape();
        let ts = self.value(temporal).shape();
        if ss != Shape::new(c, c, 1, 3, 3) || ts != Shape::new(c, c, 3, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "pseudo3d_pair",
                left: ss,
                right: ts,
            });
        }
        let s = self.conv2d(x, spatial, None, 1, pad)?;
        self.temporal_conv(s, temporal, None)
    }

    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) = ops::channel_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::Norm { x, gamma, beta, stats }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a `(B, C, 1, 1, 1)` or `(1, C, 1, 1, 1)` tensor to every
    /// `(frame, row, column)` of `x`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(bias).shape();
        if bs.channels != xs.channels || (bs.batch != 1 && bs.batch != xs.batch) || bs.frames * bs.plane() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_channel",
                left: xs,
                right: bs,
            });
        }
        let n = xs.frames * xs.plane();
        let mut out = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for (i, blk) in out.data_mut().chunks_mut(n).enumerate() {
            let (b, c) = (i / xs.channels, i % xs.channels);
            let v = bd[if bs.batch == 1 { c } else { b * xs.channels + c }];
            blk.iter_mut().for_each(|e| *e += v);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddChannel { x, bias }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = ops::upsample2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_unshuffle(self.value(x), r)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unshuffle(x, r), rg))
    }

    /// `mean((w_row * (target - pred))^2)`, with one weight per image row
    /// broadcast over batch, channels, frames and columns.
    pub fn latitude_mse(&mut self, pred: Var, target: &Tensor, row_weights: &[f32]) -> Result<Var> {
        let ps = self.value(pred).shape();
        target.expect_shape("latitude_mse", ps)?;
        if row_weights.len() != ps.height {
            return Err(Error::invalid(
                "latitude_mse",
                format!("{} row weights for prediction {ps}", row_weights.len()),
            ));
        }
        let value = weighted_sq_mean(self.value(pred), target, row_weights);
        let rg = self.rg(pred);
        let v = self.push(
            Tensor::scalar(value as f32),
            Op::LatitudeMse {
                pred,
                target: target.clone(),
                row_weights: row_weights.to_vec(),
            },
            rg,
        );
        self.nodes[v.0].scalar = Some(value);
        Ok(v)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value: f64 = self.value(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let rg = self.rg(x);
        let v = self.push(Tensor::scalar(value as f32), Op::SumSquares(x), rg);
        self.nodes[v.0].scalar = Some(value);
        v
    }

    /// `sum(weights ⊙ x)`.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        weights.expect_shape("weighted_sum", self.value(x).shape())?;
        let value: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &w)| a as f64 * w as f64)
            .sum();
        let rg = self.rg(x);
        let v = self.push(
            Tensor::scalar(value as f32),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        );
        self.nodes[v.0].scalar = Some(value);
        Ok(v)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.value(loss).shape();
        if ls.numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be a scalar, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => out.inputs.push((Var(i), g)),
                Op::Param(id) => out.params.push((*id, g)),
                Op::Conv2d { x, k, b, stride, pad } => {
                    let xv = self.value(*x);
                    if self.rg(*k) || b.is_some_and(|b| self.rg(b)) {
                        let (dk, db) = conv2d_grad_params(&g, xv, self.value(*k).shape(), *stride, *pad)?;
                        self.acc(&mut grads, *k, dk)?;
                        if let Some(b) = b {
                            self.acc(&mut grads, *b, db)?;
                        }
                    }
                    if self.rg(*x) {
                        let dx = conv2d_grad_input(&g, self.value(*k), xv.shape(), *stride, *pad)?;
                        self.acc(&mut grads, *x, dx)?;
                    }
                }
                Op::Temporal { x, k, b } => {
                    let xv = self.value(*x);
                    if self.rg(*k) || b.is_some_and(|b| self.rg(b)) {
                        let (dk, db) = temporal_conv_grad_params(&g, xv, self.value(*k).shape())?;
                        self.acc(&mut grads, *k, dk)?;
                        if let Some(b) = b {
                            self.acc(&mut grads, *b, db)?;
                        }
                    }
                    if self.rg(*x) {
                        let dx = temporal_conv_grad_input(&g, self.value(*k), xv.shape())?;
                        self.acc(&mut grads, *x, dx)?;
                    }
                }
                Op::Norm { x, gamma, beta, stats } => {
                    let (dx, dg, db) = channel_norm_backward(&g, self.value(*x), self.value(*gamma), stats)?;
                    self.acc(&mut grads, *x, dx)?;
                    self.acc(&mut grads, *gamma, dg)?;
                    self.acc(&mut grads, *beta, db)?;
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = g.zip_map(xv, "silu backward", |gv, xv| gv * ops::silu_grad(xv))?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.clone())?;
                    }
                    self.acc(&mut grads, *a, g)?;
                }
                Op::Scale(x, s) => {
                    let dx = g.scale(*s);
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::AddChannel { x, bias } => {
                    if self.rg(*bias) {
                        let bs = self.value(*bias).shape();
                        let xs = g.shape();
                        let n = xs.frames * xs.plane();
                        let mut db = vec![0.0f64; bs.numel()];
                        for (j, blk) in g.data().chunks(n).enumerate() {
                            let (b, c) = (j / xs.channels, j % xs.channels);
                            let slot = if bs.batch == 1 { c } else { b * xs.channels + c };
                            db[slot] += blk.iter().map(|&v| v as f64).sum::<f64>();
                        }
                        let db = Tensor::new(bs, db.into_iter().map(|v| v as f32).collect())?;
                        self.acc(&mut grads, *bias, db)?;
                    }
                    self.acc(&mut grads, *x, g)?;
                }
                Op::Upsample2(x) => {
                    let dx = upsample2_backward(&g, self.value(*x).shape())?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Unshuffle(x, r) => {
                    let dx = ops::pixel_shuffle(&g, *r)?;
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::LatitudeMse { pred, target, row_weights } => {
                    let seed = g.data()[0];
                    let pv = self.value(*pred);
                    let s = pv.shape();
                    let n = s.numel() as f32;
                    let mut dp = Tensor::zeros(s);
                    let (pd, td) = (pv.data(), target.data());
                    for (r, row) in dp.data_mut().chunks_mut(s.width).enumerate() {
                        let w = row_weights[r % s.height];
                        let base = r * s.width;
                        for (j, o) in row.iter_mut().enumerate() {
                            *o = seed * -2.0 * w * w * (td[base + j] - pd[base + j]) / n;
                        }
                    }
                    self.acc(&mut grads, *pred, dp)?;
                }
                Op::SumSquares(x) => {
                    let seed = g.data()[0];
                    let dx = self.value(*x).map(|v| 2.0 * v * seed);
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::WeightedSum { x, weights } => {
                    let seed = g.data()[0];
                    let dx = weights.map(|w| w * seed);
                    self.acc(&mut grads, *x, dx)?;
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                existing.expect_shape("gradient accumulation", g.shape())?;
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// `mean((w_row * (target - pred))^2)` in `f64`, row-major order.
pub(crate) fn weighted_sq_mean(pred: &Tensor, target: &Tensor, row_weights: &[f32]) -> f64 {
    let s = pred.shape();
    let mut acc = 0.0f64;
    for (r, (prow, trow)) in pred.data().chunks(s.width).zip(target.data().chunks(s.width)).enumerate() {
        let w = row_weights[r % s.height] as f64;
        for (&p, &t) in prow.iter().zip(trow) {
            let d = w * (t as f64 - p as f64);
            acc += d * d;
        }
    }
    acc / s.numel() as f64
}
