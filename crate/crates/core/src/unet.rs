//! Four-level pseudo-3D U-Net noise predictor with adapter injection points.
//!
//! Every level runs a residual block (`norm -> silu -> 3x3 conv -> norm ->
//! +time embedding -> silu -> temporal conv`, plus skip). Encoder level `l`
//! adds the adapter feature `f^(l+1)` right after its residual block; that sum
//! is the level's skip connection. Levels are separated by strided 3x3 convs
//! on the way down and by `conv -> nearest 2x upsample` on the way up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{self, AdapterConfig, AdapterFeatures, AdapterInput};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PadMode;
use crate::param::{channel_vector, init_conv2d, init_temporal, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const PREFIX: &str = "unet";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Video channels in and out.
    pub in_channels: usize,
    /// Width of each of the four levels.
    pub channels: [usize; 4],
    /// Nominal clip length used for training; the network itself accepts any.
    pub frames: usize,
    /// Sinusoidal timestep embedding size (even).
    pub temb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 3,
            channels: [16, 32, 64, 64],
            frames: 8,
            temb_dim: 32,
        }
    }
}

impl DenoiserConfig {
    /// Reduced widths for single-core training runs.
    pub fn compact() -> Self {
        DenoiserConfig {
            channels: [8, 16, 32, 32],
            ..Self::default()
        }
    }

    /// Adapter configuration whose widths match this encoder.
    pub fn matching_adapter(&self) -> AdapterConfig {
        AdapterConfig {
            channels: self.channels,
            ..AdapterConfig::default()
        }
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.channels != self.in_channels {
            return Err(Error::invalid(
                "unet_forward",
                format!("input {s} must have {} channels", self.in_channels),
            ));
        }
        if s.height % 8 != 0 || s.width % 8 != 0 || s.height == 0 || s.width == 0 {
            return Err(Error::invalid(
                "unet_forward",
                format!("spatial extents {}x{} must be positive multiples of 8", s.height, s.width),
            ));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let c = self.channels;
        [self.in_channels, c[0], c[1], c[2], c[3], self.frames, self.temb_dim]
            .iter()
            .map(|&v| v as f32)
            .collect()
    }

    pub fn from_vec(v: &[f32]) -> Result<Self> {
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        if u.len() != 7 || u.iter().zip(v).any(|(&a, &b)| a as f32 != b) {
            return Err(Error::invalid("denoiser config", "expected 7 non-negative integers"));
        }
        let cfg = DenoiserConfig {
            in_channels: u[0],
            channels: [u[1], u[2], u[3], u[4]],
            frames: u[5],
            temb_dim: u[6],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) || self.temb_dim == 0 || self.temb_dim % 2 != 0 {
            return Err(Error::invalid(
                "denoiser config",
                "widths must be >= 1 and the embedding size a positive even number",
            ));
        }
        Ok(())
    }
}

/// `sin(t * f_i)` for the first half, `cos(t * f_i)` for the second, with
/// `f_i = 10000^(-i / (D/2))`. Shape `(B, D, 1, 1, 1)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let (s, c): (Vec<f32>, Vec<f32>) = freqs.map(|a| (a.sin() as f32, a.cos() as f32)).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::new(Shape::new(ts.len(), dim, 1, 1, 1), data).expect("length matches")
}

fn p(name: &str, part: &str) -> String {
    format!("{PREFIX}.{name}.{part}")
}

fn insert_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
    store.insert(p(name, "w"), init_conv2d(rng, c_out, c_in, k));
    store.insert(p(name, "b"), Tensor::zeros(Shape::new(c_out, 1, 1, 1, 1)));
}

fn insert_block(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, temb: usize) {
    store.insert(p(name, "norm1.g"), channel_vector(c_in, 1.0));
    store.insert(p(name, "norm1.b"), channel_vector(c_in, 0.0));
    store.insert(p(name, "conv.w"), init_conv2d(rng, c_out, c_in, 3));
    insert_conv(store, rng, &format!("{name}.temb"), c_out, temb, 1);
    store.insert(p(name, "norm2.g"), channel_vector(c_out, 1.0));
    store.insert(p(name, "norm2.b"), channel_vector(c_out, 0.0));
    store.insert(p(name, "tconv.w"), init_temporal(rng, c_out, c_out, 3));
    store.insert(p(name, "tconv.b"), Tensor::zeros(Shape::new(c_out, 1, 1, 1, 1)));
    if c_in != c_out {
        insert_conv(store, rng, &format!("{name}.skip"), c_out, c_in, 1);
    }
}

/// Registers all denoiser parameters under the `unet.` prefix. The output
/// conv is zero-initialized.
pub fn init_unet(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let d = cfg.temb_dim;
    insert_conv(store, rng, "conv_in", c[0], cfg.in_channels, 3);
    insert_conv(store, rng, "temb", d, d, 1);
    let mut prev = c[0];
    for l in 0..4 {
        insert_block(store, rng, &format!("enc{l}"), prev, c[l], d);
        if l < 3 {
            insert_conv(store, rng, &format!("down{l}"), c[l], c[l], 3);
        }
        prev = c[l];
    }
    insert_block(store, rng, "mid", c[3], c[3], d);
    for l in (0..4).rev() {
        insert_block(store, rng, &format!("dec{l}"), c[l], c[l], d);
        if l > 0 {
            insert_conv(store, rng, &format!("up{l}"), c[l - 1], c[l], 3);
        }
    }
    store.insert(p("out_norm", "g"), channel_vector(c[0], 1.0));
    store.insert(p("out_norm", "b"), channel_vector(c[0], 0.0));
    store.insert(p("conv_out", "w"), Tensor::zeros(Shape::new(cfg.in_channels, c[0], 1, 3, 3)));
    store.insert(p("conv_out", "b"), Tensor::zeros(Shape::new(cfg.in_channels, 1, 1, 1, 1)));
    Ok(())
}

struct Ctx<'a> {
    store: &'a ParamStore,
    pad: PadMode,
    temb: Var,
}

fn conv(g: &mut Graph, cx: &Ctx, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = g.param(cx.store, &p(name, "w"))?;
    let b = g.param(cx.store, &p(name, "b"))?;
    g.conv2d(x, w, Some(b), stride, cx.pad)
}

fn norm_silu(g: &mut Graph, cx: &Ctx, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(cx.store, &format!("{name}.g"))?;
    let beta = g.param(cx.store, &format!("{name}.b"))?;
    let n = g.channel_norm(x, gamma, beta)?;
    Ok(g.silu(n))
}

fn res_block(g: &mut Graph, cx: &Ctx, x: Var, name: &str) -> Result<Var> {
    let h = norm_silu(g, cx, x, &p(name, "norm1"))?;
    let cw = g.param(cx.store, &p(name, "conv.w"))?;
    let h = g.conv2d(h, cw, None, 1, cx.pad)?;
    let gamma = g.param(cx.store, &p(name, "norm2.g"))?;
    let beta = g.param(cx.store, &p(name, "norm2.b"))?;
    let h = g.channel_norm(h, gamma, beta)?;
    let tw = g.param(cx.store, &p(&format!("{name}.temb"), "w"))?;
    let tb = g.param(cx.store, &p(&format!("{name}.temb"), "b"))?;
    let te = g.conv2d(cx.temb, tw, Some(tb), 1, PadMode::Zeros)?;
    let h = g.add_channel(h, te)?;
    let h = g.silu(h);
    let kw = g.param(cx.store, &p(name, "tconv.w"))?;
    let kb = g.param(cx.store, &p(name, "tconv.b"))?;
    let h = g.temporal_conv(h, kw, Some(kb))?;
    let skip = if cx.store.contains(&p(&format!("{name}.skip"), "w")) {
        conv(g, cx, x, &format!("{name}.skip"), 1)?
    } else {
        x
    };
    g.add(skip, h)
}

/// Records the denoiser forward pass on `g`.
///
/// `ts` holds one timestep per batch element. `feats` are injected with
/// weight `w`; `None` or `w == 0` skips injection entirely.
#[allow(clippy::too_many_arguments)]
pub fn unet_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DenoiserConfig,
    x: Var,
    ts: &[usize],
    feats: Option<[Var; 4]>,
    w: f32,
    pad: PadMode,
) -> Result<Var> {
    let xs = g.value(x).shape();
    cfg.check_input(xs)?;
    if ts.len() != xs.batch {
        return Err(Error::invalid(
            "unet_forward",
            format!("{} timesteps for a batch of {}", ts.len(), xs.batch),
        ));
    }
    let emb = g.input(timestep_embedding(ts, cfg.temb_dim));
    let mut cx = Ctx { store, pad, temb: emb };
    let t = conv(g, &cx, emb, "temb", 1)?;
    cx.temb = g.silu(t);

    let mut h = conv(g, &cx, x, "conv_in", 1)?;
    let mut skips = Vec::with_capacity(4);
    for l in 0..4 {
        h = res_block(g, &cx, h, &format!("enc{l}"))?;
        if let Some(f) = feats.filter(|_| w != 0.0) {
            let fs = g.value(f[l]).shape();
            if fs != g.value(h).shape() {
                return Err(Error::invalid(
                    "inject_features",
                    format!("scale {}: encoder feature {} vs adapter feature {fs}", l + 1, g.value(h).shape()),
                ));
            }
            let scaled = if w == 1.0 { f[l] } else { g.scale(f[l], w) };
            h = g.add(h, scaled)?;
        }
        skips.push(h);
        if l < 3 {
            h = conv(g, &cx, h, &format!("down{l}"), 2)?;
        }
    }
    h = res_block(g, &cx, h, "mid")?;
    for l in (0..4).rev() {
        h = g.add(h, skips[l])?;
        h = res_block(g, &cx, h, &format!("dec{l}"))?;
        if l > 0 {
            h = conv(g, &cx, h, &format!("up{l}"), 1)?;
            h = g.upsample2(h);
        }
    }
    let h = norm_silu(g, &cx, h, &format!("{PREFIX}.out_norm"))?;
    conv(g, &cx, h, "conv_out", 1)
}

/// Predicts the noise in `z_t` at timestep `t` without recording gradients.
pub fn unet_forward(
    z_t: &Tensor,
    t: usize,
    feats: Option<&AdapterFeatures>,
    w: f32,
    cfg: &DenoiserConfig,
    store: &ParamStore,
    pad: PadMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(z_t.clone());
    let fv = feats.map(|f| f.scales.clone().map(|s| g.input(s)));
    let ts = vec![t; z_t.shape().batch];
    let out = unet_graph(&mut g, store, cfg, x, &ts, fv, w, pad)?;
    Ok(g.into_value(out))
}

/// Denoiser plus adapter sharing one parameter store.
#[derive(Clone, Debug)]
pub struct PanoModel {
    pub denoiser: DenoiserConfig,
    pub adapter: AdapterConfig,
    pub params: ParamStore,
}

impl PanoModel {
    /// Fresh denoiser and adapter, each drawn from its own seeded stream.
    pub fn new(denoiser: DenoiserConfig, seed: u64) -> Result<Self> {
        let adapter = denoiser.matching_adapter();
        let mut params = ParamStore::new();
        init_unet(&mut params, &denoiser, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut m = PanoModel {
            denoiser,
            adapter,
            params,
        };
        m.init_adapter(seed)?;
        Ok(m)
    }

    /// (Re)initializes the adapter parameters.
    pub fn init_adapter(&mut self, seed: u64) -> Result<()> {
        if self.adapter.channels != self.denoiser.channels {
            return Err(Error::invalid(
                "init_adapter",
                format!(
                    "adapter widths {:?} differ from encoder widths {:?}",
                    self.adapter.channels, self.denoiser.channels
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e40);
        adapter::init_adapter(&mut self.params, &self.adapter, &mut rng)
    }

    pub fn has_adapter(&self) -> bool {
        self.params.count(adapter::PREFIX) > 0
    }

    /// Noise prediction with the adapter driven by `condition` (or its zero
    /// stand-in when absent) and injected with weight `w`.
    pub fn predict(&self, z_t: &Tensor, t: usize, condition: Option<AdapterInput<'_>>, w: f32, pad: PadMode) -> Result<Tensor> {
        let feats = match condition {
            Some(c) if w != 0.0 => {
                let s = z_t.shape();
                let want = self.adapter.condition_shape(s.batch, s.frames, s.height, s.width);
                if c.shape() != want {
                    return Err(Error::invalid(
                        "predict",
                        format!("condition {} does not match latent {s} (expected {want})", c.shape()),
                    ));
                }
                Some(adapter::adapter_forward(c, &self.adapter, &self.params, pad)?)
            }
            _ => None,
        };
        unet_forward(z_t, t, feats.as_ref(), w, &self.denoiser, &self.params, pad)
    }

    /// Borrowing denoiser for the sampler with a fixed injection weight.
    pub fn denoiser(&self, w: f32) -> ModelDenoiser<'_> {
        ModelDenoiser { model: self, w }
    }
}

pub struct ModelDenoiser<'a> {
    model: &'a PanoModel,
    w: f32,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict_noise(&mut self, x_t: &Tensor, t: usize, condition: Option<&Tensor>, pad: PadMode) -> Result<Tensor> {
        self.model.predict(x_t, t, condition.map(AdapterInput::Tensor), self.w, pad)
    }
}
