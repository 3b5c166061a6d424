//! Independent conditional flow matching: straight-line probability path
//! from a standard normal prior to the data, regressed with MSE.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::ode::{integrate, IntegrationResult, SolverConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{FieldModel, Objective};

pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z_p: Tensor,
    pub z_future: Tensor,
    pub t: f64,
    pub eps: Tensor,
    pub z_t: Tensor,
    pub u_t: Tensor,
}

/// `z_t = (1−t)·z_p + t·z_future + σ·ε`, `u_t = z_future − z_p`.
pub fn sample_path(z_p: &Tensor, z_future: &Tensor, t: f64, eps: &Tensor, sigma: f64) -> Result<FlowSample> {
    if z_p.shape() != z_future.shape() {
        return Err(Error::shape("sample_path", z_p.shape(), z_future.shape()));
    }
    if z_p.shape() != eps.shape() {
        return Err(Error::shape("sample_path", z_p.shape(), eps.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("sample_path", format!("t = {t} outside [0, 1]")));
    }
    let z_t: Vec<f64> = z_p
        .data()
        .iter()
        .zip(z_future.data())
        .zip(eps.data())
        .map(|((&p, &f), &e)| (1.0 - t) * p + t * f + sigma * e)
        .collect();
    let u_t = z_future.zip_map(z_p, |f, p| f - p)?;
    Ok(FlowSample {
        z_p: z_p.clone(),
        z_future: z_future.clone(),
        t,
        eps: eps.clone(),
        z_t: Tensor::new(z_p.shape().to_vec(), z_t)?,
        u_t,
    })
}

pub fn cfm_loss(v_hat: &Tensor, u_t: &Tensor) -> Result<f64> {
    if v_hat.shape() != u_t.shape() {
        return Err(Error::shape("cfm_loss", v_hat.shape(), u_t.shape()));
    }
    Ok(v_hat.data().iter().zip(u_t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v_hat.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfmObjective {
    pub sigma: f64,
}

impl Default for CfmObjective {
    fn default() -> Self {
        CfmObjective { sigma: DEFAULT_SIGMA }
    }
}

impl Objective for CfmObjective {
    fn name(&self) -> &'static str {
        "cfm"
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
        let shape = target.shape().to_vec();
        let z_p = Tensor::randn(shape.clone(), rng);
        let t: f64 = rng.gen();
        let eps = Tensor::randn(shape, rng);
        let s = sample_path(&z_p, target, t, &eps, self.sigma)?;
        let z_t = tape.constant(s.z_t);
        let u = tape.constant(s.u_t);
        let v = if train_mode {
            model.forward_vars(tape, p, z_t, t, cond, Some(rng as &mut dyn rand::RngCore))?
        } else {
            model.forward_vars(tape, p, z_t, t, cond, None)?
        };
        tape.mse(v, u)
    }
}

/// Integrates the learned ODE from `z0` at t=0 to t=1.
pub fn sample<M: FieldModel>(
    model: &M,
    store: &ParamStore,
    cond: &M::Cond,
    z0: &Tensor,
    solver: &SolverConfig,
) -> Result<IntegrationResult> {
    integrate(|z: &Tensor, t| model.eval(store, z, t, cond), z0, solver)
}
