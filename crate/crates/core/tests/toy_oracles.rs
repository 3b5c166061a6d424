//! Closed-form toy optima against Monte-Carlo estimates, and a learned
//! linear field against the closed form.

use flowcast_core::cfm::{sample_path, CfmObjective, DEFAULT_SIGMA};
use flowcast_core::diffusion::{ddim_sample_with, NoiseSchedule};
use flowcast_core::nn::ParamStore;
use flowcast_core::ode::{integrate, Method, SolverConfig};
use flowcast_core::tensor::Tensor;
use flowcast_core::toy::{optimal_cfm_field, optimal_eps_predictor, GaussianToy, ToyLinearField};
use flowcast_core::train::{train, FieldModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DRAWS: usize = 1_000_000;
const BINS: usize = 20;

fn scalar(v: f64) -> Tensor {
    Tensor::new([1], vec![v]).unwrap()
}

/// Bins `(x, y)` pairs on `x` over `[lo, hi)` and returns `(centre, mean y, count)`.
fn binned(pairs: impl Iterator<Item = (f64, f64)>, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / BINS as f64;
    let mut sum = vec![(0.0, 0.0, 0usize); BINS];
    for (x, y) in pairs {
        if x >= lo && x < hi {
            let b = ((x - lo) / width) as usize;
            sum[b].0 += x;
            sum[b].1 += y;
            sum[b].2 += 1;
        }
    }
    sum.into_iter().filter(|b| b.2 >= 2000).map(|(x, y, n)| (x / n as f64, y / n as f64, n)).collect()
}

#[test]
fn cfm_optimum_is_the_conditional_mean_of_the_target_velocity() {
    let toy = GaussianToy::new(vec![1.5], 0.5).unwrap();
    let sigma = DEFAULT_SIGMA;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [0.2, 0.5, 0.8] {
        let pairs: Vec<(f64, f64)> = (0..DRAWS)
            .map(|_| {
                let x0 = scalar(rng.sample(StandardNormal));
                let x1 = toy.sample(&mut rng);
                let eps = scalar(rng.sample(StandardNormal));
                let p = sample_path(&x0, &x1, t, &eps, sigma).unwrap();
                (p.z_t.item(), p.u_t.item())
            })
            .collect();
        let sd = ((1.0f64 - t).powi(2) + t * t * 0.25).sqrt();
        let centre = t * 1.5;
        for (z, mean, n) in binned(pairs.into_iter(), centre - 2.0 * sd, centre + 2.0 * sd) {
            let want = optimal_cfm_field(&scalar(z), t, &toy, sigma).unwrap().item();
            // Within-bin spread of u is below 2; bin-centre bias is second order.
            let tol = 5.0 * 2.0 / (n as f64).sqrt() + 0.01;
            assert!((mean - want).abs() < tol, "t={t} z={z:.3}: {mean} vs {want}");
        }
    }
}

#[test]
fn eps_optimum_is_the_conditional_mean_of_the_noise() {
    let toy = GaussianToy::new(vec![-1.0], 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ab in [0.1, 0.5, 0.9] {
        let (a, b) = (f64::sqrt(ab), f64::sqrt(1.0 - ab));
        let pairs: Vec<(f64, f64)> = (0..DRAWS)
            .map(|_| {
                let x0 = toy.sample(&mut rng).item();
                let eps: f64 = rng.sample(StandardNormal);
                (a * x0 + b * eps, eps)
            })
            .collect();
        let sd = (ab * 0.25 + 1.0 - ab).sqrt();
        for (x, mean, n) in binned(pairs.into_iter(), -a - 2.0 * sd, -a + 2.0 * sd) {
            let want = optimal_eps_predictor(&scalar(x), ab, &toy).unwrap().item();
            assert!((mean - want).abs() < 5.0 / (n as f64).sqrt() + 0.01, "ab={ab} x={x:.3}: {mean} vs {want}");
        }
    }
}

#[test]
fn linear_model_learns_the_optimal_field() {
    let toy = GaussianToy::new(vec![2.0, -1.0], 0.5).unwrap();
    let mut store = ParamStore::new();
    let model = ToyLinearField::new(&mut store, 2, 6);
    let cfg = TrainConfig { steps: 3000, batch: 256, lr: 3e-2, weight_decay: 0.0, ema_decay: 0.0, ..TrainConfig::default() };
    let out = train(&model, &store, &toy, &CfmObjective::default(), &cfg, 3, None).unwrap();
    let mut worst = 0.0f64;
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let sd = ((1.0f64 - t).powi(2) + t * t * 0.25).sqrt();
        for k in -2..=2 {
            let z = Tensor::new([2], vec![2.0 * t + k as f64 * sd, -t + k as f64 * sd]).unwrap();
            let got = model.eval(&out.params, &z, t, &()).unwrap();
            let want = optimal_cfm_field(&z, t, &toy, DEFAULT_SIGMA).unwrap();
            for (g, w) in got.data().iter().zip(want.data()) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    assert!(worst < 0.05, "max field error {worst}");
}

fn moments(draws: &[f64]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    (mean, (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn oracle_samplers_recover_the_target() {
    let toy = GaussianToy::new(vec![0.7], 0.3).unwrap();
    let n = 4000;
    let (se_m, se_s) = (0.3 / (n as f64).sqrt(), 0.3 / (2.0 * n as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flow: Vec<f64> = (0..n)
        .map(|_| {
            let z0 = scalar(rng.sample(StandardNormal));
            let cfg = SolverConfig::fixed(Method::Rk4, 50);
            integrate(|z: &Tensor, t| optimal_cfm_field(z, t, &toy, 0.0), &z0, &cfg).unwrap().z.item()
        })
        .collect();
    let schedule = NoiseSchedule::default();
    let ddim: Vec<f64> = (0..n)
        .map(|_| {
            let x = scalar(rng.sample(StandardNormal));
            ddim_sample_with(|x: &Tensor, t| optimal_eps_predictor(x, schedule.alpha_bar(t)?, &toy), &x, &schedule, schedule.steps())
                .unwrap()
                .x0
                .item()
        })
        .collect();
    for draws in [flow, ddim] {
        let (m, s) = moments(&draws);
        assert!((m - 0.7).abs() < 5.0 * se_m, "mean {m}");
        assert!((s - 0.3).abs() < 5.0 * se_s, "std {s}");
    }
}
