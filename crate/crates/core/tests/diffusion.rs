mod common;

use common::rng;
use panolab::diffusion::*;
use panolab::gradcheck::backward_and_check;
use panolab::graph::Graph;
use panolab::param::ParamStore;
use panolab::tensor::{Shape, Tensor};
use panolab::{PadMode, Result};
use proptest::prelude::*;
use rand::Rng;

fn zero_denoiser(x: &Tensor, _t: usize, _c: Option<&Tensor>, _p: PadMode) -> Result<Tensor> {
    Ok(Tensor::zeros(x.shape()))
}

#[test]
fn alpha_bars_match_direct_products() {
    let s = NoiseSchedule::standard();
    assert_eq!(s.betas()[0], 0.00085);
    assert_eq!(s.betas()[999], 0.012);
    let mut prod = 1.0f64;
    for t in 0..1000 {
        let beta = 0.00085 + (0.012 - 0.00085) * t as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-6, "t {t}");
        if t > 0 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }
}

#[test]
fn q_sample_moments_monte_carlo() {
    let s = NoiseSchedule::standard();
    let n = 10_000;
    for &t in &[10usize, 400, 999] {
        let x0 = Tensor::full(Shape::new(1, 1, 1, 1, n), 0.7);
        let eps = Tensor::randn(x0.shape(), &mut rng(t as u64));
        let x = q_sample(&x0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let mean = x.sum() / n as f64;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sigma2) = (ab.sqrt() * 0.7, 1.0 - ab);
        // standard errors of the sample mean and sample variance of a Gaussian
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "t {t}: mean {mean} vs {mu}");
        assert!((var - sigma2).abs() < 3.0 * se_var, "t {t}: var {var} vs {sigma2}");
    }
}

#[test]
fn q_sample_then_ddim_inversion_recovers_x0() {
    let s = NoiseSchedule::standard();
    let mut r = rng(77);
    for _ in 0..20 {
        let t = r.random_range(0..1000);
        let x0 = Tensor::uniform(Shape::new(1, 3, 2, 4, 8), 1.0, &mut r);
        let eps = Tensor::randn(x0.shape(), &mut r);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let (_, x0_hat) = ddim_step(&xt, &eps, s.alpha_bar(t), 1.0).unwrap();
        assert!(x0_hat.max_abs_diff(&x0) < 1e-4, "t {t}");
    }
}

/// Standalone f64 DDIM loop with a zero noise prediction.
fn zero_eps_oracle(z: &[f32], n_steps: usize) -> Vec<f64> {
    let mut ab = Vec::with_capacity(1000);
    let mut acc = 1.0f64;
    for t in 0..1000 {
        acc *= 1.0 - (0.00085 + 0.01115 * t as f64 / 999.0);
        ab.push(acc);
    }
    let stride = 1000 / n_steps;
    let ts: Vec<usize> = (0..n_steps).map(|i| 999 - i * stride).collect();
    let mut x: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    for (i, &t) in ts.iter().enumerate() {
        let prev = if i + 1 < ts.len() { ab[ts[i + 1]] } else { 1.0 };
        for v in x.iter_mut() {
            *v = prev.sqrt() * (*v / ab[t].sqrt());
        }
    }
    x
}

#[test]
fn zero_denoiser_matches_standalone_oracle() {
    let s = NoiseSchedule::standard();
    let z = Tensor::randn(Shape::new(1, 3, 2, 4, 8), &mut rng(5));
    for n in [1, 5, 25] {
        let out = ddim_sample(&mut zero_denoiser, z.clone(), None, &s, n, |_, _| Ok(())).unwrap();
        let oracle = zero_eps_oracle(z.data(), n);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "n {n}: {a} vs {b}");
        }
        let closed: Vec<f64> = z.data().iter().map(|&v| v as f64 / s.alpha_bar(999).sqrt()).collect();
        for (a, b) in oracle.iter().zip(&closed) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    let s = NoiseSchedule::standard();
    let z = Tensor::randn(Shape::new(1, 2, 2, 4, 8), &mut rng(1));
    let mut den = |x: &Tensor, t: usize, _: Option<&Tensor>, _: PadMode| Ok(x.map(|v| (v * 0.3).sin() + t as f32 * 1e-4));
    let a = ddim_sample(&mut den, z.clone(), None, &s, 25, |_, _| Ok(())).unwrap();
    let b = ddim_sample(&mut den, z, None, &s, 25, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hook_sees_every_step_in_order() {
    let s = NoiseSchedule::standard();
    let z = Tensor::zeros(Shape::new(1, 1, 1, 2, 4));
    let mut seen = Vec::new();
    let mut ts = Vec::new();
    let mut den = |x: &Tensor, t: usize, _: Option<&Tensor>, _: PadMode| {
        ts.push(t);
        Ok(Tensor::zeros(x.shape()))
    };
    ddim_sample(&mut den, z, None, &s, 25, |i, _| {
        seen.push(i);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..25).collect::<Vec<_>>());
    assert_eq!(ts, ddim_timesteps(1000, 25).unwrap());
}

#[test]
fn latitude_weights_acceptance_values() {
    let w = LatitudeWeights::new(64, 8).unwrap();
    for i in 0..64 {
        let expect = ((2.0 * i as f64 - 63.0) / 128.0 * std::f64::consts::PI).cos();
        assert!((w.get(i, 0) as f64 - expect).abs() < 1e-6);
        assert_eq!(w.get(i, 3), w.get(63 - i, 5));
        assert!(w.get(i, 0) > 0.0 && w.get(i, 0) <= 1.0);
    }
    assert!((w.get(0, 0) as f64 - 0.024541).abs() < 1e-6);
    assert!((w.get(31, 0) as f64 - 0.999699).abs() < 1e-6);
    let w2 = LatitudeWeights::new(2, 3).unwrap();
    assert!((w2.get(0, 0) as f64 - 0.5f64.sqrt()).abs() < 1e-7);
}

#[test]
fn latitude_loss_gradient_closed_form() {
    let mut r = rng(12);
    let s = Shape::new(2, 2, 2, 6, 4);
    let eps = Tensor::randn(s, &mut r);
    let w = LatitudeWeights::new(6, 4).unwrap();
    let mut store = ParamStore::new();
    store.insert("eps_hat", Tensor::randn(s, &mut r));
    let mut g = Graph::new();
    let v = g.param(&store, "eps_hat").unwrap();
    let loss = g.latitude_mse(v, &eps, w.row_values()).unwrap();
    let grads = g.backward(loss).unwrap();
    let got = grads.param(store.id("eps_hat").unwrap()).unwrap();
    let hat = &store.get("eps_hat").unwrap().value;
    let n = s.numel() as f64;
    for i in 0..s.numel() {
        let row = (i / 4) % 6;
        let wr = w.get(row, 0) as f64;
        let expect = -2.0 * wr * wr * (eps.data()[i] as f64 - hat.data()[i] as f64) / n;
        assert!((got.data()[i] as f64 - expect).abs() <= 1e-3 * expect.abs().max(1e-6), "{i}");
    }
    let coords: Vec<_> = (0..s.numel()).step_by(7).map(|i| ("eps_hat".to_string(), i)).collect();
    let (max, _) = backward_and_check(&mut store, &coords, 1e-2, |g, st| {
        let v = g.param(st, "eps_hat")?;
        g.latitude_mse(v, &eps, w.row_values())
    })
    .unwrap();
    assert!(max < 1e-3, "{max}");
}

proptest! {
    #[test]
    fn latitude_loss_bounded_by_weight_extremes(seed in 0u64..10_000, h in 1usize..12, w in 1usize..6) {
        let mut r = rng(seed);
        let s = Shape::new(1, 2, 2, h, w);
        let a = Tensor::randn(s, &mut r);
        let b = Tensor::randn(s, &mut r);
        let lw = LatitudeWeights::new(h, w).unwrap();
        let loss = latitude_loss(&a, &b, &lw).unwrap();
        let mse = latitude_loss(&a, &b, &LatitudeWeights::uniform(h, w)).unwrap();
        let max = lw.row_values().iter().fold(0f64, |m, &v| m.max(v as f64));
        let min = lw.row_values().iter().fold(1f64, |m, &v| m.min(v as f64));
        let slack = 1e-6 * mse;
        prop_assert!(loss <= max * max * mse + slack);
        prop_assert!(loss >= min * min * mse - slack);
        prop_assert_eq!(latitude_loss(&a, &a, &lw).unwrap(), 0.0);
    }

    #[test]
    fn ddim_inversion_any_timestep(seed in 0u64..10_000, t in 0usize..1000) {
        let s = NoiseSchedule::standard();
        let mut r = rng(seed);
        let x0 = Tensor::uniform(Shape::new(1, 1, 1, 3, 5), 1.0, &mut r);
        let eps = Tensor::randn(x0.shape(), &mut r);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let (_, x0_hat) = ddim_step(&xt, &eps, s.alpha_bar(t), 1.0).unwrap();
        prop_assert!(x0_hat.max_abs_diff(&x0) < 1e-4);
    }
}
