//! Latent datasets and ensemble forecasting through the codec.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentStats, Vae};
use crate::data::SampleWindow;
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::VectorFieldNet;
use crate::metrics::{build_report, MetricReport, ReportOptions, ThresholdSet};
use crate::nn::ParamStore;
use crate::ode::SolverConfig;
use crate::tensor::Tensor;
use crate::train::PairSource;

/// How a latent forecast is drawn from the trained network.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    /// Integrate the learned flow ODE.
    Flow(SolverConfig),
    /// Deterministic DDIM with an ε-prediction network.
    Ddim { steps: usize, schedule: NoiseSchedule },
}

impl Sampler {
    pub fn label(&self) -> String {
        match self {
            Sampler::Flow(cfg) if cfg.method.is_adaptive() => format!("cfm-{}", cfg.method),
            Sampler::Flow(cfg) => format!("cfm-{}-{}", cfg.method, cfg.steps),
            Sampler::Ddim { steps, .. } => format!("ddim-{steps}"),
        }
    }
}

/// Frozen codec plus the latent standardization fitted on training data.
#[derive(Clone, Debug)]
pub struct Codec<'a> {
    pub vae: &'a Vae,
    pub store: &'a ParamStore,
    pub stats: &'a LatentStats,
}

impl Codec<'_> {
    /// Standardized latent means of `[T, H, W]` frames and the original extents.
    pub fn encode(&self, frames: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (mu, dims) = self.vae.encode_mean_padded(self.store, frames)?;
        Ok((self.stats.standardize(&mu)?, dims))
    }

    pub fn decode(&self, latent: &Tensor, dims: (usize, usize)) -> Result<Tensor> {
        let z = self.stats.destandardize(latent)?;
        self.vae.decode_cropped(self.store, &z, dims)
    }
}

/// Raw (unstandardized) latent means for `(past, future)` of every window.
pub fn encode_windows(vae: &Vae, store: &ParamStore, windows: &[SampleWindow]) -> Result<Vec<(Tensor, Tensor)>> {
    crate::par::try_map_indices(windows.len(), |i| {
        let w = &windows[i];
        let (past, _) = vae.encode_mean_padded(store, &w.past)?;
        let (future, _) = vae.encode_mean_padded(store, &w.future)?;
        Ok((past, future))
    })
}

/// Training pairs `(future, past)` in standardized latent space.
pub fn latent_source(latents: &[(Tensor, Tensor)], stats: &LatentStats) -> Result<PairSource<Tensor>> {
    let items = latents
        .iter()
        .map(|(p, f)| Ok((stats.standardize(f)?, stats.standardize(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairSource { items })
}

/// Per-channel statistics over past and future latents.
pub fn fit_stats(latents: &[(Tensor, Tensor)]) -> Result<LatentStats> {
    LatentStats::from_latents(latents.iter().flat_map(|(p, f)| [p, f]))
}

#[derive(Clone, Debug)]
pub struct Forecast {
    pub members: Vec<Tensor>,
    /// Network evaluations per member, averaged and rounded.
    pub nfe: usize,
    pub seconds: f64,
}

/// Seed for window `index` of a run seeded with `seed`.
pub fn window_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[derive(Clone, Debug)]
pub struct Forecaster<'a> {
    pub codec: Codec<'a>,
    pub net: &'a VectorFieldNet,
    pub params: &'a ParamStore,
}

impl Forecaster<'_> {
    /// Draws `n` members from standardized conditioning latents. Member `i`
    /// takes its initial noise from stream `i` of a generator seeded by `seed`.
    pub fn sample_latents(&self, cond: &Tensor, n: usize, sampler: &Sampler, seed: u64) -> Result<(Vec<Tensor>, usize)> {
        if n == 0 {
            return Err(Error::invalid("ensemble_forecast", "ensemble size must be at least 1"));
        }
        let shape = self.net.config.future_shape().to_vec();
        let out = crate::par::try_map_indices(n, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z0 = Tensor::randn(shape.clone(), &mut rng);
            let r = match sampler {
                Sampler::Flow(cfg) => crate::cfm::sample(self.net, self.params, cond, &z0, cfg)
                    .map(|r| (r.z, r.nfe)),
                Sampler::Ddim { steps, schedule } => {
                    ddim_sample(self.net, self.params, cond, &z0, schedule, *steps).map(|r| (r.x0, r.nfe))
                }
            };
            r.map_err(|e| Error::Member { member: i, source: Box::new(e) })
        })?;
        let nfe = (out.iter().map(|o| o.1).sum::<usize>() + n / 2) / n;
        Ok((out.into_iter().map(|(z, _)| z).collect(), nfe))
    }

    /// Encodes `past` once, samples `n` members and decodes each to pixels.
    pub fn ensemble_forecast(&self, past: &Tensor, n: usize, sampler: &Sampler, seed: u64) -> Result<Forecast> {
        let start = Instant::now();
        let (cond, dims) = self.codec.encode(past)?;
        let (latents, nfe) = self.sample_latents(&cond, n, sampler, seed)?;
        let members = latents
            .iter()
            .map(|z| self.codec.decode(z, dims))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forecast { members, nfe, seconds: start.elapsed().as_secs_f64() })
    }

    /// Forecasts every window; window `i` uses `window_seed(seed, i)`.
    pub fn forecast_windows(&self, pasts: &[&Tensor], n: usize, sampler: &Sampler, seed: u64) -> Result<Vec<Forecast>> {
        crate::par::try_map_indices(pasts.len(), |i| {
            self.ensemble_forecast(pasts[i], n, sampler, window_seed(seed, i))
                .map_err(|e| Error::invalid("forecast", format!("window {i}: {e}")))
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub nfe: usize,
    pub seconds_per_sequence: f64,
}

pub fn evaluate_forecasts(forecasts: &[Forecast], truths: &[Tensor], thresholds: &ThresholdSet) -> Result<Evaluation> {
    let members: Vec<Vec<Tensor>> = forecasts.iter().map(|f| f.members.clone()).collect();
    let report = build_report(&members, truths, thresholds, &ReportOptions::default())?;
    let seconds = forecasts.iter().map(|f| f.seconds).sum::<f64>() / forecasts.len().max(1) as f64;
    Ok(Evaluation { report, nfe: forecasts.first().map_or(0, |f| f.nfe), seconds_per_sequence: seconds })
}

/// Scores the repeat-last-frame baseline on the given windows.
pub fn persistence_report(windows: &[SampleWindow], thresholds: &ThresholdSet) -> Result<MetricReport> {
    let fc = windows
        .iter()
        .map(|w| Ok(vec![crate::metrics::persistence(&w.past, w.future.shape()[0])?]))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<Tensor> = windows.iter().map(|w| w.future.clone()).collect();
    build_report(&fc, &truths, thresholds, &ReportOptions::default())
}
