//! Noise schedule, closed-form forward noising, deterministic DDIM sampling
//! and the cosine-of-latitude weighted noise-prediction loss.

use crate::error::{Error, Result};
use crate::graph::weighted_sq_mean;
use crate::ops::PadMode;
use crate::tensor::Tensor;

/// Per-timestep `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`, stored in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = start + t/(T−1)·(end − start)` for `t = 0..T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("linear_beta_schedule", format!("need T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "linear_beta_schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let span = beta_end - beta_start;
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|t| if t == steps - 1 { beta_end } else { beta_start + t as f64 / last * span })
            .collect();
        Self::from_betas(betas)
    }

    /// The schedule used for training and sampling throughout the lab:
    /// `T = 1000`, `β` from 0.00085 to 0.012.
    pub fn standard() -> Self {
        Self::linear(1000, 0.00085, 0.012).expect("valid constants")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("noise_schedule", "every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t >= sched.len() {
        return Err(Error::invalid("q_sample", format!("timestep {t} outside [0, {})", sched.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "q_sample", |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// `x̂0 = (x_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(eps_hat, "predict_x0", |x, e| ((x as f64 - n * e as f64) / s) as f32)
}

/// One deterministic (η = 0) DDIM update; returns `(x_prev, x̂0)`.
pub fn ddim_step(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64, alpha_bar_prev: f64) -> Result<(Tensor, Tensor)> {
    let x0 = predict_x0(x_t, eps_hat, alpha_bar)?;
    let (s, n) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let prev = x0.zip_map(eps_hat, "ddim_step", |x, e| (s * x as f64 + n * e as f64) as f32)?;
    Ok((prev, x0))
}

/// Descending timesteps `T−1, T−1−s, …` with stride `s = T / n_steps`.
pub fn ddim_timesteps(train_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > train_steps {
        return Err(Error::invalid(
            "ddim_sample",
            format!("n_steps must be in 1..={train_steps}, got {n_steps}"),
        ));
    }
    let stride = train_steps / n_steps;
    Ok((0..n_steps).map(|i| train_steps - 1 - i * stride).collect())
}

/// Noise predictor driven by the sampler.
pub trait Denoiser {
    fn predict_noise(&mut self, x_t: &Tensor, t: usize, condition: Option<&Tensor>, pad: PadMode) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Tensor, usize, Option<&Tensor>, PadMode) -> Result<Tensor>,
{
    fn predict_noise(&mut self, x_t: &Tensor, t: usize, condition: Option<&Tensor>, pad: PadMode) -> Result<Tensor> {
        self(x_t, t, condition, pad)
    }
}

/// State handed to the per-step hook before each denoiser call.
#[derive(Clone, Debug)]
pub struct StepState {
    pub latent: Tensor,
    pub condition: Option<Tensor>,
    pub pad: PadMode,
}

/// Deterministic DDIM sampling from `z_t` at timestep `T−1`.
///
/// `hook(step, &mut state)` runs once per step, before the denoiser, and may
/// replace the latent, the condition and the padding mode for that step.
/// Returns the final `x̂0`.
pub fn ddim_sample<D, H>(
    denoiser: &mut D,
    z_t: Tensor,
    condition: Option<Tensor>,
    sched: &NoiseSchedule,
    n_steps: usize,
    mut hook: H,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
    H: FnMut(usize, &mut StepState) -> Result<()>,
{
    let steps = ddim_timesteps(sched.len(), n_steps)?;
    let mut state = StepState {
        latent: z_t,
        condition,
        pad: PadMode::Zeros,
    };
    for (i, &t) in steps.iter().enumerate() {
        state.pad = PadMode::Zeros;
        hook(i, &mut state)?;
        let eps = denoiser.predict_noise(&state.latent, t, state.condition.as_ref(), state.pad)?;
        if eps.shape() != state.latent.shape() {
            return Err(Error::ShapeMismatch {
                op: "ddim_sample (denoiser output)",
                left: eps.shape(),
                right: state.latent.shape(),
            });
        }
        let ab_prev = steps.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let (prev, _) = ddim_step(&state.latent, &eps, sched.alpha_bar(t), ab_prev)?;
        state.latent = prev;
    }
    Ok(state.latent)
}

/// Row weights `W_i = cos((2i − H + 1)/(2H) · π)` over `rows x cols`,
/// constant along each row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatitudeWeights {
    rows: usize,
    cols: usize,
    row_values: Vec<f32>,
}

impl LatitudeWeights {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("latitude_weight_matrix", "extents must be >= 1"));
        }
        let h = rows as f64;
        let row_values = (0..rows)
            .map(|i| ((2.0 * i as f64 - h + 1.0) / (2.0 * h) * std::f64::consts::PI).cos() as f32)
            .collect();
        Ok(LatitudeWeights { rows, cols, row_values })
    }

    /// All ones: plain mean-squared error.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        LatitudeWeights {
            rows,
            cols,
            row_values: vec![1.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, _j: usize) -> f32 {
        self.row_values[i]
    }

    pub fn row_values(&self) -> &[f32] {
        &self.row_values
    }
}

pub fn latitude_weight_matrix(latent_height: usize, latent_width: usize) -> Result<LatitudeWeights> {
    LatitudeWeights::new(latent_height, latent_width)
}

/// `mean((W ⊙ (ε − ε̂))²)` with `W` broadcast over batch, channels and frames.
pub fn latitude_loss(eps: &Tensor, eps_hat: &Tensor, w: &LatitudeWeights) -> Result<f64> {
    eps.expect_shape("latitude_loss", eps_hat.shape())?;
    let s = eps.shape();
    if s.height != w.rows || s.width != w.cols {
        return Err(Error::invalid(
            "latitude_loss",
            format!("weights are {}x{} but tensors are {s}", w.rows, w.cols),
        ));
    }
    Ok(weighted_sq_mean(eps_hat, eps, &w.row_values))
}
