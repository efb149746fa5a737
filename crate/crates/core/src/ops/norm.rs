//! Per-channel standardization over `(frames, height, width)` with a learned
//! scale and shift, computed separately for every batch element.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Mean and reciprocal standard deviation per `(batch, channel)`.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

fn check(x: Shape, gamma: Shape, beta: Shape) -> Result<()> {
    if gamma.numel() != x.channels || beta.numel() != x.channels {
        return Err(Error::ShapeMismatch {
            op: "channel_norm (scale/shift vs input channels)",
            left: x,
            right: gamma,
        });
    }
    Ok(())
}

const FIXED_SCALE: f64 = (1u64 << 40) as f64;
const FIXED_LIMIT: f64 = (1u128 << 86) as f64;

/// Sum whose result does not depend on element order: every term is rounded
/// to a multiple of 2^-40 and accumulated as an integer. Falls back to a plain
/// sum when a term is non-finite or too large for the accumulator.
fn fixed_sum(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut acc = 0i128;
    for v in values.clone() {
        if !(v.abs() < FIXED_LIMIT) {
            return values.sum();
        }
        acc += (v * FIXED_SCALE).round() as i128;
    }
    acc as f64 / FIXED_SCALE
}

pub fn channel_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    let s = x.shape();
    check(s, gamma.shape(), beta.shape())?;
    let n = s.frames * s.plane();
    let xd = x.data();
    let (mean, rstd): (Vec<f32>, Vec<f32>) = xd
        .chunks(n)
        .map(|blk| {
            let m = fixed_sum(blk.iter().map(|&v| v as f64)) / n as f64;
            let var = fixed_sum(blk.iter().map(|&v| (v as f64 - m).powi(2))) / n as f64;
            (m as f32, (1.0 / (var + NORM_EPS).sqrt()) as f32)
        })
        .unzip();
    let mut out = vec![0.0f32; s.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for_each_chunk(&mut out, n, |bc, blk| {
        let c = bc % s.channels;
        let (m, r) = (mean[bc], rstd[bc]);
        let (g, b) = (gd[c], bd[c]);
        for (o, &v) in blk.iter_mut().zip(&xd[bc * n..(bc + 1) * n]) {
            *o = (v - m) * r * g + b;
        }
    });
    Ok((Tensor::new(s, out)?, NormStats { mean, rstd }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn channel_norm_backward(
    grad_out: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.shape();
    grad_out.expect_shape("channel_norm backward", s)?;
    let n = s.frames * s.plane();
    let (xd, gd, gam) = (x.data(), grad_out.data(), gamma.data());
    let mut dx = vec![0.0f32; s.numel()];
    // per (b, c): sums of dy and dy * xhat
    let sums: Vec<(f64, f64)> = (0..s.batch * s.channels)
        .map(|bc| {
            let (m, r) = (stats.mean[bc], stats.rstd[bc]);
            let mut sd = 0.0f64;
            let mut sdx = 0.0f64;
            for (&g, &v) in gd[bc * n..(bc + 1) * n].iter().zip(&xd[bc * n..(bc + 1) * n]) {
                sd += g as f64;
                sdx += (g * (v - m) * r) as f64;
            }
            (sd, sdx)
        })
        .collect();
    for_each_chunk(&mut dx, n, |bc, blk| {
        let c = bc % s.channels;
        let (m, r, g) = (stats.mean[bc], stats.rstd[bc], gam[c]);
        let (sd, sdx) = sums[bc];
        let mean_d = (sd / n as f64) as f32 * g;
        let mean_dx = (sdx / n as f64) as f32 * g;
        for ((o, &dy), &v) in blk.iter_mut().zip(&gd[bc * n..(bc + 1) * n]).zip(&xd[bc * n..(bc + 1) * n]) {
            let xhat = (v - m) * r;
            *o = r * (dy * g - mean_d - xhat * mean_dx);
        }
    });
    let mut dgamma = vec![0.0f64; s.channels];
    let mut dbeta = vec![0.0f64; s.channels];
    for b in 0..s.batch {
        for c in 0..s.channels {
            let (sd, sdx) = sums[b * s.channels + c];
            dgamma[c] += sdx;
            dbeta[c] += sd;
        }
    }
    let cshape = Shape::new(s.channels, 1, 1, 1, 1);
    Ok((
        Tensor::new(s, dx)?,
        Tensor::new(cshape, dgamma.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(cshape, dbeta.into_iter().map(|v| v as f32).collect())?,
    ))
}
