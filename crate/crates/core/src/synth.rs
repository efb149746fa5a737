//! Procedural panoramic clips: angular-Gaussian blobs on the sphere, rotating
//! rigidly about one axis, with their exact ERP optical flow.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{erp_pixel_to_dir, normalize, rotate, rotation_flow, Vec3};
use crate::parallel::map_indices;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    /// Angular width in radians.
    pub width: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub axis: Vec3,
    /// Rotation per frame, radians.
    pub omega: f64,
    pub blobs: Vec<Blob>,
}

const UNIT_TOL: f64 = 1e-6;

fn is_unit(v: Vec3) -> bool {
    ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() <= UNIT_TOL
}

impl SceneSpec {
    /// A random scene of `frames` frames at `height x 2·height`.
    ///
    /// Draws 3 to 6 blobs with uniform centers on the sphere, widths in
    /// `[0.25, 0.6]` rad and channel values in `[0.15, 1]`; the rotation axis
    /// is the pole for a third of the scenes and uniform otherwise, with
    /// `|omega| <= 0.2` rad per frame.
    pub fn random(seed: u64, frames: usize, height: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| -> Result<Vec3> {
            let v = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal));
            normalize(v, "random scene")
        };
        let n = rng.random_range(3..=6);
        let mut blobs = Vec::with_capacity(n);
        for _ in 0..n {
            let center = unit(&mut rng)?;
            let width = rng.random_range(0.25..=0.6);
            let color = [0; 3].map(|_| rng.random_range(0.15..=1.0));
            blobs.push(Blob { center, width, color });
        }
        let axis = if rng.random_bool(1.0 / 3.0) {
            [0.0, 0.0, if rng.random_bool(0.5) { 1.0 } else { -1.0 }]
        } else {
            unit(&mut rng)?
        };
        let omega = rng.random_range(-0.2..=0.2);
        let spec = SceneSpec {
            seed,
            frames,
            height,
            width: 2 * height,
            axis,
            omega,
            blobs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("scene spec", msg));
        if self.frames == 0 || self.height == 0 {
            return bad("frames and height must be >= 1".into());
        }
        if self.width != 2 * self.height {
            return bad(format!("width {} must be twice the height {}", self.width, self.height));
        }
        if !is_unit(self.axis) {
            return bad(format!("axis {:?} is not a unit vector", self.axis));
        }
        if !(self.omega.abs() < std::f64::consts::PI) {
            return bad(format!("|omega| must be < π, got {}", self.omega));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if !is_unit(b.center) {
                return bad(format!("blob {i} center {:?} is not a unit vector", b.center));
            }
            if !(b.width > 0.0) {
                return bad(format!("blob {i} width must be > 0, got {}", b.width));
            }
            if b.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("blob {i} color {:?} outside [0, 1]", b.color));
            }
        }
        Ok(())
    }

    /// Plain-text `key=value` form, one key per line.
    pub fn to_text(&self) -> String {
        let join3 = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "axis={}", join3(&self.axis));
        let _ = writeln!(s, "omega={}", self.omega);
        let _ = writeln!(s, "n_blobs={}", self.blobs.len());
        let centers: Vec<String> = self.blobs.iter().map(|b| join3(&b.center)).collect();
        let widths: Vec<String> = self.blobs.iter().map(|b| b.width.to_string()).collect();
        let colors: Vec<String> = self.blobs.iter().map(|b| join3(&b.color)).collect();
        let _ = writeln!(s, "blob_centers={}", centers.join(";"));
        let _ = writeln!(s, "blob_widths={}", widths.join(","));
        let _ = writeln!(s, "blob_colors={}", colors.join(";"));
        s
    }

    /// Parses [`SceneSpec::to_text`] output. Blank lines and `#` comments are
    /// skipped; unknown, repeated or missing keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        const KEYS: [&str; 10] = [
            "seed",
            "frames",
            "height",
            "width",
            "axis",
            "omega",
            "n_blobs",
            "blob_centers",
            "blob_widths",
            "blob_colors",
        ];
        let mut values: [Option<(usize, &str)>; 10] = [None; 10];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::SceneSpec { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let k = k.trim();
            let slot = KEYS.iter().position(|&x| x == k).ok_or_else(|| err(format!("unknown key `{k}`")))?;
            if values[slot].is_some() {
                return Err(err(format!("repeated key `{k}`")));
            }
            values[slot] = Some((i + 1, v.trim()));
        }
        let get = |slot: usize| {
            values[slot].ok_or_else(|| Error::invalid("scene spec", format!("missing key `{}`", KEYS[slot])))
        };
        fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
            s.trim().parse().map_err(|_| Error::SceneSpec {
                line,
                msg: format!("cannot parse `{s}`"),
            })
        }
        fn triple(line: usize, s: &str) -> Result<[f64; 3]> {
            let parts: Vec<&str> = s.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::SceneSpec {
                    line,
                    msg: format!("expected three comma-separated numbers, got `{s}`"),
                });
            }
            Ok([num(line, parts[0])?, num(line, parts[1])?, num(line, parts[2])?])
        }
        fn list<T>(line: usize, s: &str, sep: char, f: impl Fn(usize, &str) -> Result<T>) -> Result<Vec<T>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(sep).map(|p| f(line, p)).collect()
        }
        let (l, v) = get(0)?;
        let seed = num(l, v)?;
        let (l, v) = get(1)?;
        let frames = num(l, v)?;
        let (l, v) = get(2)?;
        let height = num(l, v)?;
        let (l, v) = get(3)?;
        let width = num(l, v)?;
        let (l, v) = get(4)?;
        let axis = triple(l, v)?;
        let (l, v) = get(5)?;
        let omega = num(l, v)?;
        let (nl, v) = get(6)?;
        let n: usize = num(nl, v)?;
        let (l, v) = get(7)?;
        let centers = list(l, v, ';', triple)?;
        let (l, v) = get(8)?;
        let widths = list(l, v, ',', num::<f64>)?;
        let (l, v) = get(9)?;
        let colors = list(l, v, ';', triple)?;
        if centers.len() != n || widths.len() != n || colors.len() != n {
            return Err(Error::SceneSpec {
                line: nl,
                msg: format!(
                    "n_blobs={n} but got {} centers, {} widths, {} colors",
                    centers.len(),
                    widths.len(),
                    colors.len()
                ),
            });
        }
        let blobs = centers
            .into_iter()
            .zip(widths)
            .zip(colors)
            .map(|((center, width), color)| Blob { center, width, color })
            .collect();
        let spec = SceneSpec {
            seed,
            frames,
            height,
            width,
            axis,
            omega,
            blobs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Blob centers at frame `k`: rotated by `k · omega` about the axis.
    pub fn centers_at(&self, k: usize) -> Vec<Vec3> {
        self.blobs
            .iter()
            .map(|b| rotate(b.center, self.axis, k as f64 * self.omega))
            .collect()
    }
}

/// Screen-composited blob intensity `1 - Π(1 - c_b · g_b)` of one channel at
/// direction `d`, with `g_b = exp(-angle(d, center_b)² / width_b²)`.
fn shade(d: Vec3, blobs: &[Blob], centers: &[Vec3], channel: usize) -> f32 {
    let mut keep = 1.0f64;
    for (b, c) in blobs.iter().zip(centers) {
        let cos = (d[0] * c[0] + d[1] * c[1] + d[2] * c[2]).clamp(-1.0, 1.0);
        let a = cos.acos();
        keep *= 1.0 - b.color[channel] * (-(a * a) / (b.width * b.width)).exp();
    }
    (1.0 - keep) as f32
}

/// Renders the clip `(1, 3, F, H, W)` in `[0, 1]` and its flow
/// `(1, 2, F, H, W)` in pixels.
pub fn render_sequence(spec: &SceneSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let video = render_video(spec)?;
    let flow = rotation_flow(spec.axis, spec.omega, spec.width, spec.height, spec.frames)?;
    Ok((video, flow))
}

pub fn render_video(spec: &SceneSpec) -> Result<Tensor> {
    let (h, w, frames) = (spec.height, spec.width, spec.frames);
    let hw = h * w;
    let dirs: Vec<Vec3> = (0..hw)
        .map(|i| erp_pixel_to_dir(i % w, i / w, w, h))
        .collect::<Result<_>>()?;
    let planes = map_indices(3 * frames, |idx| {
        let (c, f) = (idx / frames, idx % frames);
        let centers = spec.centers_at(f);
        dirs.iter().map(|&d| shade(d, &spec.blobs, &centers, c)).collect::<Vec<f32>>()
    });
    Tensor::new(Shape::new(1, 3, frames, h, w), planes.concat())
}

/// Flow of the scene rendered `factor` times finer than the clip, in pixels
/// of that finer grid.
pub fn render_flow(spec: &SceneSpec, factor: usize) -> Result<Tensor> {
    spec.validate()?;
    rotation_flow(spec.axis, spec.omega, spec.width * factor, spec.height * factor, spec.frames)
}

/// Adapter input from a pixel flow: both components divided by the width.
pub fn flow_to_condition(flow: &Tensor) -> Tensor {
    let w = flow.shape().width as f32;
    flow.map(|v| v / w)
}
