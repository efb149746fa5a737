//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use panolab::adapter::{adapter_graph, AdapterConfig};
use panolab::diffusion::LatitudeWeights;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use panolab::geom::{dir_to_lonlat, erp_pixel_to_dir, erp_to_perspective, SphereCamera, Vec3};
use panolab::synth::{render_video, SceneSpec};
use panolab::gradcheck::{backward_and_check, GradSample};
use panolab::graph::{Graph, Var};
use panolab::param::ParamStore;
use panolab::tensor::{Shape, Tensor};
use panolab::unet::{unet_graph, DenoiserConfig, PanoModel};
use panolab::PadMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const LAYERS: [&str; 14] = [
    "conv2d_3x3_zeros",
    "conv2d_3x3_circular",
    "conv2d_stride2",
    "conv2d_1x1",
    "temporal_conv",
    "channel_norm",
    "silu",
    "add",
    "scale",
    "add_channel",
    "upsample2",
    "pixel_unshuffle",
    "latitude_mse",
    "sum_squares",
];

/// Fraction of the largest gradient magnitude below which a coordinate is
/// not sampled: f32 central differences cannot resolve smaller components.
pub const NOISE_FLOOR: f64 = 1e-3;

/// Draws `per` coordinates of each named parameter among those whose
/// gradient magnitude is at least `NOISE_FLOOR` times the parameter's largest.
fn coords(
    store: &ParamStore,
    grads: &panolab::graph::Gradients,
    names: &[&str],
    per: usize,
    r: &mut ChaCha8Rng,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for &n in names {
        let g = grads.param(store.id(n).unwrap()).unwrap();
        let top = g.data().iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
        let pool: Vec<usize> = (0..g.numel()).filter(|&i| g.data()[i].abs() as f64 >= NOISE_FLOOR * top).collect();
        for _ in 0..per {
            out.push((n.to_string(), pool[r.random_range(0..pool.len())]));
        }
    }
    out
}

/// Gradient check of one layer type: every input is a parameter and the
/// loss is a random projection of the layer output.
pub fn check_layer(kind: &str, seed: u64) -> (f64, Vec<GradSample>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let xs = Shape::new(2, 3, 3, 6, 8);
    store.insert("x", Tensor::randn(xs, &mut r));
    let mut names = vec!["x"];
    let conv = |store: &mut ParamStore, r: &mut ChaCha8Rng, co: usize, k: usize| {
        store.insert("k", Tensor::uniform(Shape::new(co, 3, 1, k, k), 0.5, r));
        store.insert("b", Tensor::uniform(Shape::new(co, 1, 1, 1, 1), 0.5, r));
    };
    match kind {
        "conv2d_3x3_zeros" | "conv2d_3x3_circular" | "conv2d_stride2" => {
            conv(&mut store, &mut r, 4, 3);
            names.extend(["k", "b"]);
        }
        "conv2d_1x1" => {
            conv(&mut store, &mut r, 4, 1);
            names.extend(["k", "b"]);
        }
        "temporal_conv" => {
            store.insert("k", Tensor::uniform(Shape::new(4, 3, 3, 1, 1), 0.5, &mut r));
            store.insert("b", Tensor::uniform(Shape::new(4, 1, 1, 1, 1), 0.5, &mut r));
            names.extend(["k", "b"]);
        }
        "channel_norm" => {
            store.insert("g", Tensor::uniform(Shape::new(3, 1, 1, 1, 1), 1.0, &mut r).map(|v| v + 1.5));
            store.insert("b", Tensor::uniform(Shape::new(3, 1, 1, 1, 1), 0.5, &mut r));
            names.extend(["g", "b"]);
        }
        "add" => {
            store.insert("y", Tensor::randn(xs, &mut r));
            names.push("y");
        }
        "add_channel" => {
            store.insert("b", Tensor::randn(Shape::new(2, 3, 1, 1, 1), &mut r));
            names.push("b");
        }
        _ => {}
    }
    let out_shape = {
        let mut g = Graph::new();
        let v = forward(kind, &mut g, &store).unwrap();
        g.value(v).shape()
    };
    let proj = Tensor::randn(out_shape, &mut r);
    let target = Tensor::randn(out_shape, &mut r);
    let loss = |g: &mut Graph, s: &ParamStore| -> panolab::Result<Var> {
        let v = forward(kind, g, s)?;
        match kind {
            "latitude_mse" => {
                let w = LatitudeWeights::new(out_shape.height, out_shape.width)?;
                g.latitude_mse(v, &target, w.row_values())
            }
            "sum_squares" => Ok(g.sum_squares(v)),
            _ => g.weighted_sum(v, &proj),
        }
    };
    let mut g = Graph::new();
    let l = loss(&mut g, &store).unwrap();
    let grads = g.backward(l).unwrap();
    let cs = coords(&store, &grads, &names, 6, &mut r);
    backward_and_check(&mut store, &cs, 2e-2, loss).unwrap()
}

fn forward(kind: &str, g: &mut Graph, s: &ParamStore) -> panolab::Result<Var> {
    let x = g.param(s, "x")?;
    let p = |g: &mut Graph, n: &str| g.param(s, n);
    match kind {
        "conv2d_3x3_zeros" | "conv2d_1x1" => {
            let (k, b) = (p(g, "k")?, p(g, "b")?);
            g.conv2d(x, k, Some(b), 1, PadMode::Zeros)
        }
        "conv2d_3x3_circular" => {
            let (k, b) = (p(g, "k")?, p(g, "b")?);
            g.conv2d(x, k, Some(b), 1, PadMode::CircularHorizontal)
        }
        "conv2d_stride2" => {
            let (k, b) = (p(g, "k")?, p(g, "b")?);
            g.conv2d(x, k, Some(b), 2, PadMode::CircularHorizontal)
        }
        "temporal_conv" => {
            let (k, b) = (p(g, "k")?, p(g, "b")?);
            g.temporal_conv(x, k, Some(b))
        }
        "channel_norm" => {
            let (gm, b) = (p(g, "g")?, p(g, "b")?);
            g.channel_norm(x, gm, b)
        }
        "silu" => Ok(g.silu(x)),
        "add" => {
            let y = p(g, "y")?;
            g.add(x, y)
        }
        "scale" => Ok(g.scale(x, -1.75)),
        "add_channel" => {
            let b = p(g, "b")?;
            g.add_channel(x, b)
        }
        "upsample2" => Ok(g.upsample2(x)),
        "pixel_unshuffle" => g.pixel_unshuffle(x, 2),
        "latitude_mse" | "sum_squares" => Ok(x),
        other => panic!("unknown layer {other}"),
    }
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 3,
        channels: [4, 4, 6, 6],
        frames: 3,
        temb_dim: 8,
    }
}

/// Tiny model with an adapter whose widths match and unshuffle factor 2.
pub fn tiny_model(seed: u64) -> PanoModel {
    let d = tiny_denoiser();
    let mut m = PanoModel::new(d.clone(), seed).unwrap();
    m.adapter = AdapterConfig {
        channels: d.channels,
        unshuffle_factor: 2,
        ..AdapterConfig::default()
    };
    let keep: Vec<String> = m.params.iter().filter(|p| !p.name.starts_with("adapter.")).map(|p| p.name.clone()).collect();
    let mut fresh = ParamStore::new();
    for n in keep {
        fresh.insert(n.clone(), m.params.get(&n).unwrap().value.clone());
    }
    m.params = fresh;
    m.init_adapter(seed).unwrap();
    m
}

/// Replaces zero-initialized output layers with random values so gradients
/// reach every upstream parameter.
pub fn randomize_heads(m: &mut PanoModel, r: &mut ChaCha8Rng) {
    for p in m.params.iter_mut() {
        if p.name.ends_with("head.w") || p.name == "unet.conv_out.w" {
            p.value = Tensor::uniform(p.value.shape(), 1.0, r);
        }
    }
}

/// Autodiff vs finite differences on `n` random coordinates of the full
/// model (adapter + denoiser) through the latitude-weighted loss. Coordinates
/// are drawn among gradient components of at least `NOISE_FLOOR` times the
/// largest one. The 16x32 latent keeps at least 8 elements per channel in
/// the coarsest normalization.
pub fn full_model_gradcheck(seed: u64, n: usize) -> (f64, Vec<GradSample>) {
    let mut r = rng(seed);
    let mut m = tiny_model(seed);
    randomize_heads(&mut m, &mut r);
    let (lh, lw) = (16, 32);
    let zs = Shape::new(1, 3, 3, lh, lw);
    let z = Tensor::randn(zs, &mut r);
    let eps = Tensor::randn(zs, &mut r);
    let cond = Tensor::randn(m.adapter.condition_shape(1, 3, lh, lw), &mut r);
    let w = LatitudeWeights::new(lh, lw).unwrap();
    let (dcfg, acfg) = (m.denoiser.clone(), m.adapter.clone());
    let forward = |g: &mut Graph, s: &ParamStore| -> panolab::Result<Var> {
        let x = g.input(z.clone());
        let c = g.input(cond.clone());
        let feats = adapter_graph(g, s, &acfg, c, PadMode::Zeros)?;
        unet_graph(g, s, &dcfg, x, &[417], Some(feats), 1.0, PadMode::Zeros)
    };
    let mut g = Graph::new();
    let pred = forward(&mut g, &m.params).unwrap();
    let loss = g.latitude_mse(pred, &eps, w.row_values()).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut pool = Vec::new();
    let mut top = 0f64;
    for p in m.params.iter() {
        let id = m.params.id(&p.name).unwrap();
        if let Some(t) = grads.param(id) {
            for (i, v) in t.data().iter().enumerate() {
                top = top.max(v.abs() as f64);
                pool.push((p.name.clone(), i, v.abs() as f64));
            }
        }
    }
    pool.retain(|c| c.2 >= NOISE_FLOOR * top);
    let cs: Vec<(String, usize)> = (0..n)
        .map(|_| {
            let c = &pool[r.random_range(0..pool.len())];
            (c.0.clone(), c.1)
        })
        .collect();
    backward_and_check(&mut m.params, &cs, 4e-2, |g, s| {
        let pred = forward(g, s)?;
        g.latitude_mse(pred, &eps, w.row_values())
    })
    .unwrap()
}

/// Projects a direction into a camera's continuous pixel coordinates.
fn project(cam: &SphereCamera, d: Vec3) -> Option<(f64, f64)> {
    let (sy, cy) = cam.yaw().sin_cos();
    let (sp, cp) = cam.pitch().sin_cos();
    let fwd = [cp * cy, cp * sy, sp];
    let right = [-sy, cy, 0.0];
    let up = [-sp * cy, -sp * sy, cp];
    let dot = |a: Vec3, b: Vec3| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let z = dot(d, fwd);
    if z <= 0.0 {
        return None;
    }
    let half = (cam.fov() / 2.0).tan();
    let s = cam.out_size() as f64;
    let a = dot(d, right) / z / half;
    let b = dot(d, up) / z / half;
    if a.abs() > 1.0 || b.abs() > 1.0 {
        return None;
    }
    Some(((a + 1.0) / 2.0 * s - 0.5, (1.0 - b) / 2.0 * s - 0.5))
}

fn bilinear_clamped(img: &[f32], n: usize, x: f64, y: f64) -> f64 {
    let c = |v: f64| v.clamp(0.0, (n - 1) as f64);
    let (x, y) = (c(x), c(y));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx: usize, yy: usize| img[yy * n + xx] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// RMSE between the two equator rows of a static random scene and the same
/// pixels read back from the four 90° equatorial views.
pub fn equator_reconstruction_rmse(seed: u64, h: usize) -> f64 {
    let w = 2 * h;
    let mut spec = SceneSpec::random(seed, 1, h).unwrap();
    spec.omega = 0.0;
    let erp = render_video(&spec).unwrap();
    let cams = SphereCamera::four_equatorial(h).unwrap();
    let views: Vec<Tensor> = cams.iter().map(|c| erp_to_perspective(&erp, c).unwrap()).collect();
    let (mut se, mut count) = (0.0, 0usize);
    for c in 0..3 {
        let plane = &erp.data()[c * h * w..(c + 1) * h * w];
        for y in [h / 2 - 1, h / 2] {
            for x in 0..w {
                let d = erp_pixel_to_dir(x, y, w, h).unwrap();
                let (lon, _) = dir_to_lonlat(d);
                let k = ((lon.rem_euclid(TAU) + PI / 4.0) / FRAC_PI_2).floor() as usize % 4;
                let (u, v) = project(&cams[k], d).expect("equator pixel inside its view");
                let view = &views[k].data()[c * h * h..(c + 1) * h * h];
                let got = bilinear_clamped(view, h, u, v);
                se += (got - plane[y * w + x] as f64).powi(2);
                count += 1;
            }
        }
    }
    (se / count as f64).sqrt()
}
