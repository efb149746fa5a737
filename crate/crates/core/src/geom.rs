//! Equirectangular (ERP) sphere geometry.
//!
//! Pixel-center convention throughout: pixel `(x, y)` of a `width x height`
//! ERP covers longitude `λ = (x + 0.5)/width · 2π − π` and latitude
//! `φ = π/2 − (y + 0.5)/height · π`. Directions are unit vectors
//! `(cos φ cos λ, cos φ sin λ, sin φ)`: `+x` looks at the image center, `+z`
//! at the north pole, and longitude grows with the column index.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::parallel::map_indices;
use crate::tensor::{Shape, Tensor};

pub type Vec3 = [f64; 3];

pub fn lonlat_to_dir(lon: f64, lat: f64) -> Vec3 {
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

pub fn dir_to_lonlat(d: Vec3) -> (f64, f64) {
    let lat = d[2].clamp(-1.0, 1.0).asin();
    (d[1].atan2(d[0]), lat)
}

/// Continuous pixel coordinates of `(lon, lat)`; integers are pixel centers.
pub fn lonlat_to_erp(lon: f64, lat: f64, width: usize, height: usize) -> (f64, f64) {
    let x = (lon + PI) / TAU * width as f64 - 0.5;
    let y = (FRAC_PI_2 - lat) / PI * height as f64 - 0.5;
    (x, y)
}

pub fn erp_to_lonlat(x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
    let lon = (x + 0.5) / width as f64 * TAU - PI;
    let lat = FRAC_PI_2 - (y + 0.5) / height as f64 * PI;
    (lon, lat)
}

pub fn erp_pixel_to_dir(x: usize, y: usize, width: usize, height: usize) -> Result<Vec3> {
    if x >= width || y >= height {
        return Err(Error::invalid(
            "erp_pixel_to_dir",
            format!("pixel ({x}, {y}) outside {width}x{height}"),
        ));
    }
    let (lon, lat) = erp_to_lonlat(x as f64, y as f64, width, height);
    Ok(lonlat_to_dir(lon, lat))
}

/// Nearest pixel of a direction; the inverse of [`erp_pixel_to_dir`].
pub fn dir_to_erp_pixel(d: Vec3, width: usize, height: usize) -> (usize, usize) {
    let (lon, lat) = dir_to_lonlat(d);
    let (x, y) = lonlat_to_erp(lon, lat, width, height);
    let xi = (x.round() as i64).rem_euclid(width as i64) as usize;
    let yi = (y.round().max(0.0) as usize).min(height - 1);
    (xi, yi)
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Right-handed rotation of `v` by `angle` about the unit vector `axis`.
pub fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let kxv = cross(axis, v);
    let kdv = dot(axis, v);
    [
        v[0] * c + kxv[0] * s + axis[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + axis[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + axis[2] * kdv * (1.0 - c),
    ]
}

pub fn normalize(v: Vec3, op: &'static str) -> Result<Vec3> {
    let n = norm(v);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::invalid(op, format!("axis {v:?} has no direction")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Pinhole camera looking out from the sphere center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereCamera {
    yaw: f64,
    pitch: f64,
    fov: f64,
    out_size: usize,
}

impl SphereCamera {
    /// `yaw` is taken modulo 2π; `pitch` must lie in `[-π/2, π/2]` and
    /// `fov` strictly inside `(0, π)`.
    pub fn new(yaw: f64, pitch: f64, fov: f64, out_size: usize) -> Result<Self> {
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::invalid("sphere_camera", format!("fov {fov} outside (0, π)")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&pitch) {
            return Err(Error::invalid("sphere_camera", format!("pitch {pitch} outside [-π/2, π/2]")));
        }
        if out_size == 0 {
            return Err(Error::invalid("sphere_camera", "output size must be >= 1"));
        }
        if !yaw.is_finite() {
            return Err(Error::invalid("sphere_camera", "yaw must be finite"));
        }
        Ok(SphereCamera {
            yaw: yaw.rem_euclid(TAU),
            pitch,
            fov,
            out_size,
        })
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    pub fn out_size(&self) -> usize {
        self.out_size
    }

    /// Viewing ray through the center of output pixel `(u, v)`; `v` grows downward.
    pub fn ray(&self, u: usize, v: usize) -> Vec3 {
        let half = (self.fov / 2.0).tan();
        let s = self.out_size as f64;
        let a = ((u as f64 + 0.5) / s * 2.0 - 1.0) * half;
        let b = (1.0 - (v as f64 + 0.5) / s * 2.0) * half;
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let fwd = [cp * cy, cp * sy, sp];
        let right = [-sy, cy, 0.0];
        let up = [-sp * cy, -sp * sy, cp];
        let r = [
            fwd[0] + a * right[0] + b * up[0],
            fwd[1] + a * right[1] + b * up[1],
            fwd[2] + a * right[2] + b * up[2],
        ];
        let n = norm(r);
        [r[0] / n, r[1] / n, r[2] / n]
    }

    /// The four equatorial 90° views at yaw 0, π/2, π and 3π/2.
    pub fn four_equatorial(out_size: usize) -> Result<[SphereCamera; 4]> {
        Ok([
            SphereCamera::new(0.0, 0.0, FRAC_PI_2, out_size)?,
            SphereCamera::new(FRAC_PI_2, 0.0, FRAC_PI_2, out_size)?,
            SphereCamera::new(PI, 0.0, FRAC_PI_2, out_size)?,
            SphereCamera::new(3.0 * FRAC_PI_2, 0.0, FRAC_PI_2, out_size)?,
        ])
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear sample of one `height x width` plane at continuous pixel
/// coordinates, wrapping horizontally and clamping vertically.
pub fn sample_bilinear(plane: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = (x - x0f) as f32;
    let fy = (y - y0f) as f32;
    let x0 = (x0f as i64).rem_euclid(width as i64) as usize;
    let x1 = (x0 + 1) % width;
    let clamp = |v: f64| (v.max(0.0) as usize).min(height - 1);
    let y0 = clamp(y0f);
    let y1 = clamp(y0f + 1.0);
    let top = lerp(plane[y0 * width + x0], plane[y0 * width + x1], fx);
    let bot = lerp(plane[y1 * width + x0], plane[y1 * width + x1], fx);
    lerp(top, bot, fy)
}

/// Gnomonic view of every frame of an ERP tensor (`width == 2 * height`).
/// Output is `(batch, channels, frames, out_size, out_size)`.
pub fn erp_to_perspective(erp: &Tensor, cam: &SphereCamera) -> Result<Tensor> {
    let s = erp.shape();
    if s.width != 2 * s.height {
        return Err(Error::invalid(
            "erp_to_perspective",
            format!("ERP must be 2:1, got {}x{}", s.width, s.height),
        ));
    }
    let n = cam.out_size;
    // per output pixel ERP coordinates, shared by all planes
    let coords: Vec<(f64, f64)> = map_indices(n * n, |i| {
        let (lon, lat) = dir_to_lonlat(cam.ray(i % n, i / n));
        lonlat_to_erp(lon, lat, s.width, s.height)
    });
    let out_shape = s.with_spatial(n, n);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in erp.data().chunks(s.plane()) {
        out.extend(coords.iter().map(|&(x, y)| sample_bilinear(plane, s.width, s.height, x, y)));
    }
    Tensor::new(out_shape, out)
}

/// Column shift used for a longitude rotation of `theta` on a `width`-column ERP.
pub fn rotation_shift(theta: f64, width: usize) -> isize {
    let t = theta.rem_euclid(TAU);
    let k = (width as f64 * t / TAU).round() as isize;
    k.rem_euclid(width as isize)
}

/// Horizontal rotation: `out[.., j] = in[.., (j + k) mod width]` with
/// `k = round(width · θ / 2π)`. The leftmost `k` columns move to the far right.
pub fn rotate_erp(x: &Tensor, theta: f64) -> Tensor {
    x.roll_columns(rotation_shift(theta, x.shape().width))
}

/// Canonicalizes a horizontal displacement into `(-width/2, width/2]`.
pub fn wrap_dx(dx: f64, width: usize) -> f64 {
    let w = width as f64;
    let d = dx.rem_euclid(w);
    if d > w / 2.0 {
        d - w
    } else {
        d
    }
}

/// Per-pixel ERP displacement `(Δx, Δy)` in pixels produced by rotating the
/// sphere by `omega` about `axis`, replicated over `frames`.
///
/// Output shape `(1, 2, frames, height, width)`; channel 0 is Δx (wrapped into
/// `(-width/2, width/2]`), channel 1 is Δy.
pub fn rotation_flow(axis: Vec3, omega: f64, width: usize, height: usize, frames: usize) -> Result<Tensor> {
    let axis = normalize(axis, "rotation_flow")?;
    if !(omega.abs() < PI) {
        return Err(Error::invalid("rotation_flow", format!("|omega| must be < π, got {omega}")));
    }
    if width == 0 || height == 0 || frames == 0 {
        return Err(Error::invalid("rotation_flow", "extents must be >= 1"));
    }
    let hw = width * height;
    let shape = Shape::new(1, 2, frames, height, width);
    let mut data = vec![0.0f32; shape.numel()];
    let polar = axis[0] == 0.0 && axis[1] == 0.0;
    let (dx_plane, dy_plane): (Vec<f32>, Vec<f32>) = if omega == 0.0 {
        (vec![0.0; hw], vec![0.0; hw])
    } else if polar {
        // rotation about the pole shifts every longitude by the same amount
        let dx = wrap_dx(axis[2].signum() * omega / TAU * width as f64, width) as f32;
        (vec![dx; hw], vec![0.0; hw])
    } else {
        map_indices(hw, |i| {
            let (x, y) = (i % width, i / width);
            let (lon, lat) = erp_to_lonlat(x as f64, y as f64, width, height);
            let d = rotate(lonlat_to_dir(lon, lat), axis, omega);
            let (lon2, lat2) = dir_to_lonlat(d);
            let (x2, y2) = lonlat_to_erp(lon2, lat2, width, height);
            (wrap_dx(x2 - x as f64, width) as f32, (y2 - y as f64) as f32)
        })
        .into_iter()
        .unzip()
    };
    for f in 0..frames {
        data[f * hw..(f + 1) * hw].copy_from_slice(&dx_plane);
        data[(frames + f) * hw..(frames + f + 1) * hw].copy_from_slice(&dy_plane);
    }
    Tensor::new(shape, data)
}
