//! Noise-prediction training with zero-condition dropout, rotation
//! augmentation and the two-phase freeze contract.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapter::{self, adapter_graph};
use crate::diffusion::{q_sample, LatitudeWeights, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::PadMode;
use crate::optim::Adam;
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::unet::{self, unet_graph, PanoModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Unconditional denoiser training; the adapter is not evaluated.
    Backbone,
    /// Denoiser frozen, adapter trained.
    Adapter,
}

impl Phase {
    pub fn trainable_prefix(self) -> &'static str {
        match self {
            Phase::Backbone => unet::PREFIX,
            Phase::Adapter => adapter::PREFIX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of replacing a sample's condition with zeros.
    pub p_zero: f64,
    pub latitude_loss: bool,
    pub rotation_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 2,
            lr: 1e-3,
            p_zero: 0.2,
            latitude_loss: true,
            rotation_augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_zero) {
            return Err(Error::invalid("train", format!("p_zero must lie in [0, 1], got {}", self.p_zero)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("train", "batch must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train", format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Marks the parameters of the phase trainable and everything else frozen.
/// Returns `(frozen, trainable)` names.
pub fn freeze_partition(params: &mut ParamStore, phase: Phase) -> Result<(Vec<String>, Vec<String>)> {
    let prefix = phase.trainable_prefix();
    let mut frozen = Vec::new();
    let mut trainable = Vec::new();
    for p in params.iter_mut() {
        p.trainable = p.name.split('.').next() == Some(prefix);
        if p.trainable {
            trainable.push(p.name.clone());
        } else {
            frozen.push(p.name.clone());
        }
    }
    if trainable.is_empty() {
        return Err(Error::invalid(
            "freeze_partition",
            format!("no `{prefix}.` parameters to train"),
        ));
    }
    Ok((frozen, trainable))
}

/// Videos in `[0, 1]` with their aligned (already normalized) flow conditions.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub videos: Vec<Tensor>,
    pub flows: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Draws `n` clips uniformly with replacement and stacks them.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        if self.is_empty() || self.videos.len() != self.flows.len() {
            return Err(Error::invalid("dataset", "need an equal, nonzero number of videos and flows"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let v: Vec<Tensor> = idx.iter().map(|&i| self.videos[i].clone()).collect();
        let f: Vec<Tensor> = idx.iter().map(|&i| self.flows[i].clone()).collect();
        Ok((Tensor::stack_batch(&v)?, Tensor::stack_batch(&f)?))
    }
}

/// One training example before noising.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: usize,
    /// Column shift applied to the clip; the condition moves by `shift * ratio`.
    pub shift: usize,
    pub dropped: bool,
    /// Clip mapped to `[-1, 1]`.
    pub x0: Tensor,
    pub condition: Tensor,
}

/// Draws the timestep, rotation and dropout of one clip `(1, C, F, H, W)`
/// and its condition, which is `ratio` times finer.
pub fn prepare_sample(
    video: &Tensor,
    flow: &Tensor,
    ratio: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    phase: Phase,
    rng: &mut impl Rng,
) -> Sample {
    let t = rng.random_range(0..sched.len());
    let mut x0 = video.map(|v| 2.0 * v - 1.0);
    let mut condition = flow.clone();
    let mut shift = 0;
    if cfg.rotation_augment {
        shift = rng.random_range(0..video.shape().width);
        x0 = x0.roll_columns(shift as isize);
        condition = condition.roll_columns((shift * ratio) as isize);
    }
    let dropped = phase == Phase::Adapter && rng.random_bool(cfg.p_zero);
    if dropped {
        condition = Tensor::zeros(condition.shape());
    }
    Sample {
        t,
        shift,
        dropped,
        x0,
        condition,
    }
}

/// One optimizer step on a batch of videos in `[0, 1]` and their flows.
///
/// Random draws, in order: per sample a timestep, a rotation shift (when
/// augmenting) and a dropout coin (adapter phase), then the noise tensor.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    video: &Tensor,
    flow: &Tensor,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    phase: Phase,
    model: &mut PanoModel,
    opt: &mut Adam,
    rng: &mut impl Rng,
) -> Result<f64> {
    let vs = video.shape();
    let fs = flow.shape();
    let want = model.adapter.condition_shape(vs.batch, vs.frames, vs.height, vs.width);
    if fs != want {
        return Err(Error::invalid(
            "train_step",
            format!("flow {fs} is not aligned with video {vs} (expected {want})"),
        ));
    }
    let ratio = model.adapter.unshuffle_factor;
    let mut ts = Vec::with_capacity(vs.batch);
    let mut x0s = Vec::with_capacity(vs.batch);
    let mut conds = Vec::with_capacity(vs.batch);
    for b in 0..vs.batch {
        let s = prepare_sample(&video.batch_item(b), &flow.batch_item(b), ratio, sched, cfg, phase, rng);
        ts.push(s.t);
        x0s.push(s.x0);
        conds.push(s.condition);
    }
    let mut xts = Vec::with_capacity(vs.batch);
    let mut epss = Vec::with_capacity(vs.batch);
    for (x0, &t) in x0s.iter().zip(&ts) {
        let eps = Tensor::from_fn(x0.shape(), |_| rng.sample::<f32, _>(StandardNormal));
        xts.push(q_sample(x0, t, &eps, sched)?);
        epss.push(eps);
    }
    let xt = Tensor::stack_batch(&xts)?;
    let eps = Tensor::stack_batch(&epss)?;

    let weights = if cfg.latitude_loss {
        LatitudeWeights::new(vs.height, vs.width)?
    } else {
        LatitudeWeights::uniform(vs.height, vs.width)
    };
    let mut g = Graph::new();
    let x = g.input(xt);
    let feats = match phase {
        Phase::Backbone => None,
        Phase::Adapter => {
            let c = g.input(Tensor::stack_batch(&conds)?);
            Some(adapter_graph(&mut g, &model.params, &model.adapter, c, PadMode::Zeros)?)
        }
    };
    let pred = unet_graph(&mut g, &model.params, &model.denoiser, x, &ts, feats, 1.0, PadMode::Zeros)?;
    let loss = g.latitude_mse(pred, &eps, weights.row_values())?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params)?;
    opt.step(&mut model.params);
    Ok(value)
}

/// Runs `cfg.steps` steps of `phase`, freezing the other half of the model.
/// `on_step(step, loss)` observes every loss.
pub fn train_phase(
    model: &mut PanoModel,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    phase: Phase,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if phase == Phase::Adapter && !model.has_adapter() {
        model.init_adapter(cfg.seed)?;
    }
    freeze_partition(&mut model.params, phase)?;
    let mut opt = Adam::new(cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (v, f) = data.sample_batch(cfg.batch, rng)?;
        let loss = train_step(&v, &f, sched, cfg, phase, model, &mut opt, rng)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean of the first and last `window` entries.
pub fn window_means(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

/// Zero-condition shape helper for a batch of videos.
pub fn zero_condition(model: &PanoModel, video: Shape) -> Tensor {
    Tensor::zeros(model.adapter.condition_shape(video.batch, video.frames, video.height, video.width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::DenoiserConfig;

    #[test]
    fn empty_trainable_set_rejected() {
        let mut store = ParamStore::new();
        store.insert("unet.a", Tensor::scalar(1.0));
        assert!(freeze_partition(&mut store, Phase::Adapter).is_err());
        let (frozen, trainable) = freeze_partition(&mut store, Phase::Backbone).unwrap();
        assert!(frozen.is_empty());
        assert_eq!(trainable, ["unet.a"]);
    }

    #[test]
    fn p_zero_bounds() {
        let cfg = TrainConfig {
            p_zero: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn misaligned_flow_rejected() {
        use rand::SeedableRng;
        let d = DenoiserConfig {
            channels: [4, 4, 4, 4],
            temb_dim: 4,
            ..DenoiserConfig::default()
        };
        let mut m = PanoModel::new(d, 0).unwrap();
        let mut opt = Adam::new(1e-3).unwrap();
        let v = Tensor::zeros(Shape::new(1, 3, 2, 8, 16));
        let f = Tensor::zeros(Shape::new(1, 2, 2, 8, 16));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let sched = NoiseSchedule::standard();
        let err = train_step(&v, &f, &sched, &TrainConfig::default(), Phase::Adapter, &mut m, &mut opt, &mut rng);
        assert!(err.is_err());
    }
}
