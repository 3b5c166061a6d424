//! Gaussian toy problems with closed-form optimal fields.
//!
//! Target `x₁ ~ N(m, s²I)` and prior `x₀ ~ N(0, I)` are independent. Every
//! optimum below is the conditional mean of a jointly Gaussian pair, which
//! is `E[a | b] = E[a] + Cov(a, b)/Var(b)·(b − E[b])` per coordinate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::DropoutRng;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{FieldModel, Source};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianToy {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianToy {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if !(std > 0.0) || mean.is_empty() {
            return Err(Error::invalid("gaussian_toy", "need s > 0 and a non-empty mean"));
        }
        Ok(GaussianToy { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let v = self
            .mean
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new([self.dim()], v).expect("dim > 0")
    }
}

/// Conditional mean of `a` given `b` for a jointly Gaussian scalar pair.
pub fn gaussian_conditional_mean(mean_a: f64, mean_b: f64, cov_ab: f64, var_b: f64, b: f64) -> f64 {
    mean_a + cov_ab / var_b * (b - mean_b)
}

/// `E[x₁ − x₀ | x_t = z]` for `x_t = (1−t)x₀ + t·x₁ + σε`.
pub fn optimal_cfm_field(z: &Tensor, t: f64, toy: &GaussianToy, sigma: f64) -> Result<Tensor> {
    if z.shape() != [toy.dim()] {
        return Err(Error::shape("optimal_cfm_field", &[toy.dim()], z.shape()));
    }
    let s2 = toy.std * toy.std;
    let var = (1.0 - t).powi(2) + t * t * s2 + sigma * sigma;
    let cov = t * s2 - (1.0 - t);
    let v = z
        .data()
        .iter()
        .zip(&toy.mean)
        .map(|(&z, &m)| gaussian_conditional_mean(m, t * m, cov, var, z))
        .collect();
    Tensor::new([toy.dim()], v)
}

/// `E[ε | x_t]` for `x_t = √ᾱ·x₀ + √(1−ᾱ)·ε`.
pub fn optimal_eps_predictor(x_t: &Tensor, alpha_bar: f64, toy: &GaussianToy) -> Result<Tensor> {
    if x_t.shape() != [toy.dim()] {
        return Err(Error::shape("optimal_eps_predictor", &[toy.dim()], x_t.shape()));
    }
    let s2 = toy.std * toy.std;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let var = alpha_bar * s2 + 1.0 - alpha_bar;
    let v = x_t
        .data()
        .iter()
        .zip(&toy.mean)
        .map(|(&x, &m)| gaussian_conditional_mean(0.0, a * m, b, var, x))
        .collect();
    Tensor::new([toy.dim()], v)
}

impl Source for GaussianToy {
    type Cond = ();

    fn len(&self) -> Option<usize> {
        None
    }

    fn item(&self, _index: usize, rng: &mut ChaCha8Rng) -> (Tensor, ()) {
        (self.sample(rng), ())
    }
}

/// Field affine in `z` with coefficients expanded in Chebyshev polynomials
/// of `2t − 1`: `v_d = Σ_k T_k(2t−1)·(a_kd·z_d + b_kd)`.
#[derive(Clone, Debug)]
pub struct ToyLinearField {
    pub dim: usize,
    pub degree: usize,
    scale: ParamId,
    shift: ParamId,
}

impl ToyLinearField {
    pub fn new(store: &mut ParamStore, dim: usize, degree: usize) -> Self {
        let scale = store.add("toy.scale", Tensor::zeros([degree + 1, dim]));
        let shift = store.add("toy.shift", Tensor::zeros([degree + 1, dim]));
        ToyLinearField { dim, degree, scale, shift }
    }

    pub fn features(&self, t: f64) -> Tensor {
        let x = 2.0 * t - 1.0;
        let mut f = vec![1.0, x];
        while f.len() < self.degree + 1 {
            let k = f.len();
            f.push(2.0 * x * f[k - 1] - f[k - 2]);
        }
        f.truncate(self.degree + 1);
        Tensor::new([1, self.degree + 1], f).expect("non-empty")
    }
}

impl FieldModel for ToyLinearField {
    type Cond = ();

    fn forward_vars(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, _cond: &(), _rng: DropoutRng<'_>) -> Result<Var> {
        let f = tape.constant(self.features(t));
        let a = tape.matmul(f, p[self.scale])?;
        let a = tape.reshape(a, &[self.dim])?;
        let b = tape.matmul(f, p[self.shift])?;
        let b = tape.reshape(b, &[self.dim])?;
        let az = tape.mul(a, z)?;
        tape.add(az, b)
    }
}
