//! Integrators for `dz/dt = f(z, t)` on `t ∈ [0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
    AdaptiveHeun,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Euler,
        Method::Midpoint,
        Method::Rk4,
        Method::Dopri5,
        Method::AdaptiveHeun,
    ];

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Dopri5 | Method::AdaptiveHeun)
    }

    /// Field evaluations per step for fixed-step methods.
    pub fn evals_per_step(self) -> Option<usize> {
        match self {
            Method::Euler => Some(1),
            Method::Midpoint => Some(2),
            Method::Rk4 => Some(4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
            Method::AdaptiveHeun => "adaptive_heun",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("solver", format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe: usize,
    pub initial_step: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Euler,
            steps: 10,
            rtol: 1e-2,
            atol: 1e-3,
            max_nfe: 10_000,
            initial_step: 1e-2,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            min_step: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, steps: usize) -> Self {
        SolverConfig { method, steps, ..Default::default() }
    }

    pub fn adaptive(method: Method) -> Self {
        SolverConfig { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_adaptive() {
            if !(self.rtol > 0.0 && self.atol > 0.0) {
                return Err(Error::invalid("solver", "rtol and atol must be positive"));
            }
            if !(self.initial_step > 0.0) {
                return Err(Error::invalid("solver", "initial_step must be positive"));
            }
        } else if self.steps == 0 {
            return Err(Error::invalid("solver", "steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IntegrationResult {
    pub z: Tensor,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// `z + h·Σ cᵢ·kᵢ`, element-wise.
fn combine(z: &Tensor, h: f64, terms: &[(f64, &Tensor)]) -> Tensor {
    let mut out = z.data().to_vec();
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let hc = h * c;
        for (o, &v) in out.iter_mut().zip(k.data()) {
            *o += hc * v;
        }
    }
    Tensor::new(z.shape().to_vec(), out).expect("shape preserved")
}

fn checked<F>(f: &mut F, z: &Tensor, t: f64, step: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let k = f(z, t)?;
    if k.shape() != z.shape() {
        return Err(Error::shape("ode_field", z.shape(), k.shape()));
    }
    if !k.all_finite() {
        return Err(Error::NonFinite { step, context: format!("field value at t={t}") });
    }
    Ok(k)
}

/// Dispatches to the fixed-step or adaptive integrator.
pub fn integrate<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<IntegrationResult>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if cfg.method.is_adaptive() {
        integrate_adaptive(f, z0, cfg)
    } else {
        integrate_fixed(f, z0, cfg)
    }
}

/// Fixed grid `t_i = i/steps`.
pub fn integrate_fixed<F>(mut f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<IntegrationResult>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let Some(per_step) = cfg.method.evals_per_step() else {
        return Err(Error::invalid("integrate_fixed", format!("{} is adaptive", cfg.method)));
    };
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let mut z = z0.clone();
    for i in 0..n {
        let t = i as f64 / n as f64;
        z = match cfg.method {
            Method::Euler => {
                let k1 = checked(&mut f, &z, t, i)?;
                combine(&z, h, &[(1.0, &k1)])
            }
            Method::Midpoint => {
                let k1 = checked(&mut f, &z, t, i)?;
                let zm = combine(&z, h, &[(0.5, &k1)]);
                let k2 = checked(&mut f, &zm, t + 0.5 * h, i)?;
                combine(&z, h, &[(1.0, &k2)])
            }
            Method::Rk4 => {
                let k1 = checked(&mut f, &z, t, i)?;
                let k2 = checked(&mut f, &combine(&z, h, &[(0.5, &k1)]), t + 0.5 * h, i)?;
                let k3 = checked(&mut f, &combine(&z, h, &[(0.5, &k2)]), t + 0.5 * h, i)?;
                let k4 = checked(&mut f, &combine(&z, h, &[(1.0, &k3)]), t + h, i)?;
                combine(&z, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)])
            }
            _ => unreachable!(),
        };
        if !z.all_finite() {
            return Err(Error::NonFinite { step: i, context: "state".into() });
        }
    }
    Ok(IntegrationResult { z, nfe: n * per_step, accepted: n, rejected: 0 })
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Trial {
    z_new: Tensor,
    err: Tensor,
    /// Field at the new state when the method provides it for free.
    k_last: Option<Tensor>,
}

fn error_norm(err: &Tensor, z: &Tensor, z_new: &Tensor, rtol: f64, atol: f64) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .data()
        .iter()
        .zip(z.data())
        .zip(z_new.data())
        .map(|((&e, &a), &b)| {
            let r = e / (atol + rtol * a.abs().max(b.abs()));
            r * r
        })
        .sum();
    (s / n).sqrt()
}

/// Embedded-pair integration with a safety-factor step controller.
pub fn integrate_adaptive<F>(mut f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<IntegrationResult>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let exponent = match cfg.method {
        Method::Dopri5 => 1.0 / 5.0,
        Method::AdaptiveHeun => 1.0 / 2.0,
        m => return Err(Error::invalid("integrate_adaptive", format!("{m} is fixed-step"))),
    };
    let mut z = z0.clone();
    let mut t = 0.0f64;
    let mut h = cfg.initial_step.min(1.0);
    let (mut nfe, mut accepted, mut rejected) = (0usize, 0usize, 0usize);
    let mut k1 = checked(&mut f, &z, t, 0)?;
    nfe += 1;

    while t < 1.0 {
        let last = t + h >= 1.0;
        if last {
            h = 1.0 - t;
        }
        let step = accepted + rejected;
        let trial = match cfg.method {
            Method::Dopri5 => {
                let mut ks: Vec<Tensor> = vec![k1.clone()];
                for s in 1..7 {
                    let terms: Vec<(f64, &Tensor)> = DP_A[s].iter().copied().zip(ks.iter()).collect();
                    let zs = combine(&z, h, &terms);
                    ks.push(checked(&mut f, &zs, t + DP_C[s] * h, step)?);
                }
                nfe += 6;
                let terms: Vec<(f64, &Tensor)> = DP_A[6].iter().copied().zip(ks.iter()).collect();
                let z_new = combine(&z, h, &terms);
                let diff: Vec<(f64, &Tensor)> = (0..7)
                    .map(|i| (DP_A[6].get(i).copied().unwrap_or(0.0) - DP_B4[i], &ks[i]))
                    .collect();
                let err = combine(&Tensor::zeros(z.shape().to_vec()), h, &diff);
                Trial { z_new, err, k_last: ks.pop() }
            }
            _ => {
                let z_euler = combine(&z, h, &[(1.0, &k1)]);
                let k2 = checked(&mut f, &z_euler, t + h, step)?;
                nfe += 1;
                let z_new = combine(&z, h, &[(0.5, &k1), (0.5, &k2)]);
                let err = z_new.zip_map(&z_euler, |a, b| a - b)?;
                Trial { z_new, err, k_last: None }
            }
        };
        if nfe > cfg.max_nfe {
            return Err(Error::Solver(format!("exceeded max_nfe {} at t={t}", cfg.max_nfe)));
        }
        if !trial.z_new.all_finite() {
            return Err(Error::NonFinite { step, context: format!("state at t={t}") });
        }
        let e = error_norm(&trial.err, &z, &trial.z_new, cfg.rtol, cfg.atol);
        let factor = if e == 0.0 {
            cfg.max_factor
        } else {
            (cfg.safety * e.powf(-exponent)).clamp(cfg.min_factor, cfg.max_factor)
        };
        if e <= 1.0 {
            accepted += 1;
            t = if last { 1.0 } else { t + h };
            z = trial.z_new;
            if t < 1.0 {
                k1 = match trial.k_last {
                    Some(k) => k,
                    None => {
                        nfe += 1;
                        checked(&mut f, &z, t, accepted + rejected)?
                    }
                };
            }
            h *= factor;
        } else {
            rejected += 1;
            h *= factor.min(1.0);
        }
        if t < 1.0 && h < cfg.min_step {
            return Err(Error::Solver(format!("step size underflow ({h:e}) at t={t}")));
        }
    }
    Ok(IntegrationResult { z, nfe, accepted, rejected })
}
