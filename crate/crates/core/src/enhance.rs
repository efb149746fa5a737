//! Sampling-time panorama enhancements (per-step latent rotation and
//! late-stage circular padding) and the seam continuity metric.

use std::f64::consts::TAU;

use crate::diffusion::{ddim_sample, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geom::rotation_shift;
use crate::ops::PadMode;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementConfig {
    /// Rotation per denoising step, radians; stored in `[0, 2π)`.
    pub theta: f64,
    pub rotate_latents: bool,
    pub circular_late_half: bool,
    pub adapter_weight: f32,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig {
            theta: std::f64::consts::FRAC_PI_2,
            rotate_latents: true,
            circular_late_half: true,
            adapter_weight: 1.0,
        }
    }
}

impl EnhancementConfig {
    pub fn new(theta: f64, rotate_latents: bool, circular_late_half: bool, adapter_weight: f32) -> Self {
        EnhancementConfig {
            theta: theta.rem_euclid(TAU),
            rotate_latents,
            circular_late_half,
            adapter_weight,
        }
    }

    /// Both enhancements disabled.
    pub fn plain(adapter_weight: f32) -> Self {
        Self::new(0.0, false, false, adapter_weight)
    }
}

/// First sampler step that uses circular padding when the late half is on.
pub fn circular_start(n_steps: usize) -> usize {
    n_steps.div_ceil(2)
}

/// DDIM sampling with the enhancement hook installed.
///
/// Each step (when enabled) rolls the latent by `k = round(W·θ/2π)` columns
/// and the condition by `k · cond_width / latent_width`, and switches every
/// convolution to circular padding from step `ceil(n/2)` onwards. The
/// accumulated roll is undone on the returned video.
pub fn sample_with_enhancements<D>(
    denoiser: &mut D,
    condition: Option<Tensor>,
    z_t: Tensor,
    sched: &NoiseSchedule,
    n_steps: usize,
    cfg: &EnhancementConfig,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
{
    sample_inner(denoiser, condition, z_t, sched, n_steps, cfg, false)
}

/// Like [`sample_with_enhancements`] with circular padding on at every step.
pub fn sample_fully_circular<D>(
    denoiser: &mut D,
    condition: Option<Tensor>,
    z_t: Tensor,
    sched: &NoiseSchedule,
    n_steps: usize,
    cfg: &EnhancementConfig,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
{
    sample_inner(denoiser, condition, z_t, sched, n_steps, cfg, true)
}

fn sample_inner<D>(
    denoiser: &mut D,
    condition: Option<Tensor>,
    z_t: Tensor,
    sched: &NoiseSchedule,
    n_steps: usize,
    cfg: &EnhancementConfig,
    force_circular: bool,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
{
    let zs = z_t.shape();
    let ratio = match &condition {
        Some(c) => condition_ratio(zs, c.shape())?,
        None => 1,
    };
    let k = if cfg.rotate_latents {
        rotation_shift(cfg.theta, zs.width)
    } else {
        0
    };
    let late = circular_start(n_steps);
    let mut total: isize = 0;
    let out = ddim_sample(denoiser, z_t, condition, sched, n_steps, |step, st| {
        if k != 0 {
            st.latent = st.latent.roll_columns(k);
            if let Some(c) = st.condition.as_mut() {
                *c = c.roll_columns(k * ratio as isize);
            }
            total += k;
        }
        if force_circular || (cfg.circular_late_half && step >= late) {
            st.pad = PadMode::CircularHorizontal;
        }
        Ok(())
    })?;
    Ok(if total == 0 { out } else { out.roll_columns(-total) })
}

fn condition_ratio(latent: Shape, cond: Shape) -> Result<usize> {
    let ok = cond.batch == latent.batch
        && cond.frames == latent.frames
        && cond.width % latent.width == 0
        && cond.width / latent.width * latent.height == cond.height;
    if !ok {
        return Err(Error::invalid(
            "sample_with_enhancements",
            format!("condition {cond} is not an integer upscaling of latent {latent}"),
        ));
    }
    Ok(cond.width / latent.width)
}

/// Seam continuity of an ERP video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamReport {
    /// Mean `|v[.., 0] - v[.., W-1]|`.
    pub seam_gap: f64,
    /// Mean `|v[.., c] - v[.., c+1]|` over all interior column pairs.
    pub interior_gap: f64,
    /// `seam_gap / interior_gap`, or 1 when `interior_gap` is 0.
    pub ratio: f64,
}

impl std::fmt::Display for SeamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seam_gap {} interior_gap {} ratio {}", self.seam_gap, self.interior_gap, self.ratio)
    }
}

pub fn seam_metric(video: &Tensor) -> Result<SeamReport> {
    let w = video.shape().width;
    if w < 2 {
        return Err(Error::invalid("seam_metric", format!("width must be >= 2, got {w}")));
    }
    let (mut seam, mut interior) = (0.0f64, 0.0f64);
    let rows = video.numel() / w;
    for row in video.data().chunks(w) {
        seam += (row[0] as f64 - row[w - 1] as f64).abs();
        interior += row.windows(2).map(|p| (p[0] as f64 - p[1] as f64).abs()).sum::<f64>();
    }
    let seam_gap = seam / rows as f64;
    let interior_gap = interior / (rows * (w - 1)) as f64;
    let ratio = if interior_gap == 0.0 {
        if seam_gap == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        seam_gap / interior_gap
    };
    Ok(SeamReport {
        seam_gap,
        interior_gap,
        ratio,
    })
}

/// `out[.., c] = in[.., c mod W]` with twice the width; the original seam
/// lands on the center column pair.
pub fn duplicate_side_by_side(video: &Tensor) -> Tensor {
    let s = video.shape();
    let w = s.width;
    let mut data = Vec::with_capacity(video.numel() * 2);
    for row in video.data().chunks(w) {
        data.extend_from_slice(row);
        data.extend_from_slice(row);
    }
    Tensor::new(s.with_spatial(s.height, 2 * w), data).expect("doubled width")
}
