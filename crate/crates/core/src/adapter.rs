//! Motion-condition side network producing four multi-scale feature maps that
//! are added to the denoiser's encoder activations.
//!
//! Pipeline: pixel unshuffle by `unshuffle_factor`, then four blocks of
//! `1x1 conv -> pseudo-3D residual block -> zero-initialized 1x1 head`. The
//! head output of block `k` is `f^k`; blocks 1 to 3 follow it with a strided
//! 3x3 downsampling conv that feeds the next block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PadMode;
use crate::param::{init_conv2d, init_temporal, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Condition channels (2 for flow `(dx, dy)`).
    pub in_channels: usize,
    /// Feature widths per scale; must equal the denoiser encoder widths.
    pub channels: [usize; 4],
    /// Ratio between the condition resolution and the diffused grid.
    pub unshuffle_factor: usize,
    pub zero_init_output: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            in_channels: 2,
            channels: [16, 32, 64, 64],
            unshuffle_factor: 8,
            zero_init_output: true,
        }
    }
}

impl AdapterConfig {
    /// Required divisibility of the condition's height and width.
    pub fn divisor(&self) -> usize {
        self.unshuffle_factor * 8
    }

    pub fn check_condition(&self, s: Shape) -> Result<()> {
        if s.channels != self.in_channels {
            return Err(Error::invalid(
                "adapter_forward",
                format!("condition {s} must have {} channels", self.in_channels),
            ));
        }
        let d = self.divisor();
        if s.height % d != 0 || s.width % d != 0 {
            return Err(Error::invalid(
                "adapter_forward",
                format!(
                    "condition extents {}x{} must be divisible by {d} (unshuffle factor {} times 8)",
                    s.height, s.width, self.unshuffle_factor
                ),
            ));
        }
        Ok(())
    }

    /// Condition shape matching a diffused grid of `height x width`.
    pub fn condition_shape(&self, batch: usize, frames: usize, height: usize, width: usize) -> Shape {
        let r = self.unshuffle_factor;
        Shape::new(batch, self.in_channels, frames, height * r, width * r)
    }
}

/// Condition fed to [`adapter_forward`].
#[derive(Clone, Copy, Debug)]
pub enum AdapterInput<'a> {
    Tensor(&'a Tensor),
    /// All-zero condition of the given shape.
    Zero(Shape),
}

impl AdapterInput<'_> {
    pub fn shape(&self) -> Shape {
        match self {
            AdapterInput::Tensor(t) => t.shape(),
            AdapterInput::Zero(s) => *s,
        }
    }

    pub fn to_tensor(self) -> Tensor {
        match self {
            AdapterInput::Tensor(t) => t.clone(),
            AdapterInput::Zero(s) => Tensor::zeros(s),
        }
    }
}

/// `f1..f4`; spatial extents halve (rounding up) from one scale to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFeatures {
    pub scales: [Tensor; 4],
}

impl AdapterFeatures {
    pub fn all_zero(&self) -> bool {
        self.scales.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

fn name(block: usize, part: &str) -> String {
    format!("{PREFIX}.b{block}.{part}")
}

/// Registers all adapter parameters under the `adapter.` prefix.
pub fn init_adapter(store: &mut ParamStore, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<()> {
    if cfg.in_channels == 0 || cfg.unshuffle_factor == 0 || cfg.channels.contains(&0) {
        return Err(Error::invalid("init_adapter", "channel counts and unshuffle factor must be >= 1"));
    }
    let r2 = cfg.unshuffle_factor * cfg.unshuffle_factor;
    let mut c_in = cfg.in_channels * r2;
    for (k, &c) in cfg.channels.iter().enumerate() {
        let b = k + 1;
        store.insert(name(b, "conv.w"), init_conv2d(rng, c, c_in, 1));
        store.insert(name(b, "conv.b"), Tensor::zeros(Shape::new(c, 1, 1, 1, 1)));
        store.insert(name(b, "rb.spatial.w"), init_conv2d(rng, c, c, 3));
        store.insert(name(b, "rb.spatial.b"), Tensor::zeros(Shape::new(c, 1, 1, 1, 1)));
        store.insert(name(b, "rb.temporal.w"), init_temporal(rng, c, c, 3));
        store.insert(name(b, "rb.temporal.b"), Tensor::zeros(Shape::new(c, 1, 1, 1, 1)));
        let head = if cfg.zero_init_output {
            Tensor::zeros(Shape::new(c, c, 1, 1, 1))
        } else {
            init_conv2d(rng, c, c, 1)
        };
        store.insert(name(b, "head.w"), head);
        store.insert(name(b, "head.b"), Tensor::zeros(Shape::new(c, 1, 1, 1, 1)));
        if k < 3 {
            store.insert(name(b, "down.w"), init_conv2d(rng, c, c, 3));
            store.insert(name(b, "down.b"), Tensor::zeros(Shape::new(c, 1, 1, 1, 1)));
        }
        c_in = c;
    }
    Ok(())
}

fn conv(g: &mut Graph, store: &ParamStore, x: Var, block: usize, part: &str, stride: usize, pad: PadMode) -> Result<Var> {
    let w = g.param(store, &name(block, &format!("{part}.w")))?;
    let b = g.param(store, &name(block, &format!("{part}.b")))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Records the adapter forward pass on `g`; `cond` is the raw condition.
pub fn adapter_graph(g: &mut Graph, store: &ParamStore, cfg: &AdapterConfig, cond: Var, pad: PadMode) -> Result<[Var; 4]> {
    cfg.check_condition(g.value(cond).shape())?;
    let mut h = g.pixel_unshuffle(cond, cfg.unshuffle_factor)?;
    let mut feats = Vec::with_capacity(4);
    for b in 1..=4 {
        h = conv(g, store, h, b, "conv", 1, pad)?;
        let s = conv(g, store, h, b, "rb.spatial", 1, pad)?;
        let s = g.silu(s);
        let tw = g.param(store, &name(b, "rb.temporal.w"))?;
        let tb = g.param(store, &name(b, "rb.temporal.b"))?;
        let t = g.temporal_conv(s, tw, Some(tb))?;
        h = g.add(h, t)?;
        feats.push(conv(g, store, h, b, "head", 1, pad)?);
        if b < 4 {
            h = conv(g, store, h, b, "down", 2, pad)?;
        }
    }
    Ok([feats[0], feats[1], feats[2], feats[3]])
}

/// Runs the adapter without recording gradients.
pub fn adapter_forward(input: AdapterInput<'_>, cfg: &AdapterConfig, store: &ParamStore, pad: PadMode) -> Result<AdapterFeatures> {
    cfg.check_condition(input.shape())?;
    let mut g = Graph::new();
    let c = g.input(input.to_tensor());
    let vars = adapter_graph(&mut g, store, cfg, c, pad)?;
    Ok(AdapterFeatures {
        scales: vars.map(|v| g.value(v).clone()),
    })
}

/// `f_hat^i = f^i + w * f_c^i` at each scale; `w == 0` returns the encoder
/// features untouched.
pub fn inject_features(enc: &[Tensor; 4], feats: &AdapterFeatures, w: f32) -> Result<[Tensor; 4]> {
    for (i, (e, f)) in enc.iter().zip(&feats.scales).enumerate() {
        if e.shape() != f.shape() {
            return Err(Error::invalid(
                "inject_features",
                format!("scale {}: encoder feature {} vs adapter feature {}", i + 1, e.shape(), f.shape()),
            ));
        }
    }
    if w == 0.0 {
        return Ok(enc.clone());
    }
    let mut out = enc.clone();
    for (o, f) in out.iter_mut().zip(&feats.scales) {
        for (a, &b) in o.data_mut().iter_mut().zip(f.data()) {
            *a += w * b;
        }
    }
    Ok(out)
}
