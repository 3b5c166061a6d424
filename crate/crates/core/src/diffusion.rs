//! DDPM training objective and deterministic DDIM sampling.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{FieldModel, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `betas[t-1]` is β_t for t in 1..=T.
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(Error::invalid(
                "make_schedule",
                format!("need T ≥ 2 and 0 < beta_1 < beta_T < 1, got T={steps}, {beta_1}, {beta_t}"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::invalid("noise_schedule", format!("t = {t} outside 0..={}", self.steps()))),
        }
    }

    /// Continuous time fed to the network for integer step `t`.
    pub fn model_time(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }
}

pub fn q_sample_with(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε` for 1 ≤ t ≤ T.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::invalid("q_sample", format!("t = {t} outside 1..={}", schedule.steps())));
    }
    q_sample_with(x0, schedule.alpha_bar(t)?, eps)
}

pub fn ddpm_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    crate::cfm::cfm_loss(eps_hat, eps)
}

/// `x0_hat = (x_t − √(1−ᾱ)·ε̂)/√ᾱ`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Uniformly spaced, rounded, deduplicated timesteps from T down to 1.
pub fn ddim_timesteps(total: usize, sample_steps: usize) -> Result<Vec<usize>> {
    if sample_steps == 0 || sample_steps > total {
        return Err(Error::invalid("ddim", format!("sample_steps {sample_steps} outside 1..={total}")));
    }
    if sample_steps == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..sample_steps)
        .map(|i| (1.0 + (total - 1) as f64 * i as f64 / (sample_steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmObjective {
    pub schedule: NoiseSchedule,
}

impl Objective for DdpmObjective {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn sample_loss<M: FieldModel>(
        &self,
        model: &M,
        tape: &mut Tape,
        p: &Bound,
        target: &Tensor,
        cond: &M::Cond,
        rng: &mut ChaCha8Rng,
        train_mode: bool,
    ) -> Result<Var> {
        let t = rng.gen_range(1..=self.schedule.steps());
        let eps = Tensor::randn(target.shape().to_vec(), rng);
        let x_t = tape.constant(q_sample(target, t, &eps, &self.schedule)?);
        let eps_v = tape.constant(eps);
        let time = self.schedule.model_time(t);
        let out = if train_mode {
            model.forward_vars(tape, p, x_t, time, cond, Some(rng as &mut dyn RngCore))?
        } else {
            model.forward_vars(tape, p, x_t, time, cond, None)?
        };
        tape.mse(out, eps_v)
    }
}

#[derive(Clone, Debug)]
pub struct DdimResult {
    pub x0: Tensor,
    pub nfe: usize,
}

/// Deterministic DDIM from `x_T` with one ε-evaluation per timestep. The
/// last step jumps to ᾱ = 1, returning the final `x0_hat`.
pub fn ddim_sample_with<F>(mut eps_model: F, x_t: &Tensor, schedule: &NoiseSchedule, sample_steps: usize) -> Result<DdimResult>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(schedule.steps(), sample_steps)?;
    let mut x = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_next = schedule.alpha_bar(ts.get(i + 1).copied().unwrap_or(0))?;
        let eps = eps_model(&x, t)?;
        let x0 = predict_x0(&x, &eps, ab)?;
        let (a, b) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        x = x0.zip_map(&eps, |x0, e| a * x0 + b * e)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { step: i, context: format!("ddim state at t={t}") });
        }
    }
    Ok(DdimResult { x0: x, nfe: ts.len() })
}

pub fn ddim_sample<M: FieldModel>(
    model: &M,
    store: &ParamStore,
    cond: &M::Cond,
    x_t: &Tensor,
    schedule: &NoiseSchedule,
    sample_steps: usize,
) -> Result<DdimResult> {
    ddim_sample_with(|x, t| model.eval(store, x, schedule.model_time(t), cond), x_t, schedule, sample_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000).unwrap() - direct).abs() < 1e-15);
        assert!(direct > 1e-5 && direct < 1e-4);
        assert!(NoiseSchedule::linear(1000, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::linear(1000, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let x0 = Tensor::new([1], vec![2.0]).unwrap();
        let one = Tensor::new([1], vec![1.0]).unwrap();
        let v = q_sample_with(&x0, 0.25, &one).unwrap().item();
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert_eq!(q_sample_with(&x0, 0.25, &Tensor::zeros([1])).unwrap().item(), 1.0);
        assert_eq!(q_sample_with(&x0, 1.0, &one).unwrap(), x0);
        let s = NoiseSchedule::default();
        assert!(q_sample(&x0, 0, &one, &s).is_err());
        assert!(q_sample(&x0, 1001, &one, &s).is_err());
    }

    #[test]
    fn ddpm_loss_examples() {
        let e = Tensor::new([2], vec![1.0, 3.0]).unwrap();
        assert_eq!(ddpm_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(ddpm_loss(&Tensor::zeros([2]), &e).unwrap(), 5.0);
    }

    #[test]
    fn timestep_subsequences() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(1000, 2).unwrap(), vec![1000, 1]);
        assert_eq!(ddim_timesteps(1000, 1000).unwrap().len(), 1000);
        assert!(ddim_timesteps(1000, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn single_step_uses_one_evaluation() {
        let s = NoiseSchedule::default();
        let mut calls = 0;
        let r = ddim_sample_with(|x, _| { calls += 1; Ok(x.clone()) }, &Tensor::zeros([3]), &s, 1).unwrap();
        assert_eq!((r.nfe, calls), (1, 1));
    }

    #[test]
    fn exact_eps_recovers_x0() {
        // With ε̂ equal to the true noise every DDIM step lands back on the same x0.
        let s = NoiseSchedule::default();
        let x0 = Tensor::new([2], vec![0.7, -1.3]).unwrap();
        let eps = Tensor::new([2], vec![0.2, 1.1]).unwrap();
        let xt = q_sample(&x0, 1000, &eps, &s).unwrap();
        let r = ddim_sample_with(
            |x, t| {
                let ab = s.alpha_bar(t).unwrap();
                x.zip_map(&x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            },
            &xt,
            &s,
            50,
        )
        .unwrap();
        assert!(r.x0.max_abs_diff(&x0) < 1e-9);
    }

    proptest! {
        #[test]
        fn signal_noise_consistency(t in 1usize..=1000) {
            let ab = NoiseSchedule::default().alpha_bar(t).unwrap();
            prop_assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn x0_reconstruction(t in 1usize..=1000, x in -3.0f64..3.0, e in -3.0f64..3.0) {
            let s = NoiseSchedule::default();
            let x0 = Tensor::new([1], vec![x]).unwrap();
            let eps = Tensor::new([1], vec![e]).unwrap();
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&xt, &eps, s.alpha_bar(t).unwrap()).unwrap();
            prop_assert!((rec.item() - x).abs() < 1e-9);
        }

        #[test]
        fn subsequence_is_strictly_decreasing(k in 1usize..=1000) {
            let ts = ddim_timesteps(1000, k).unwrap();
            prop_assert_eq!(ts[0], 1000);
            if k > 1 { prop_assert_eq!(*ts.last().unwrap(), 1); }
            prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
