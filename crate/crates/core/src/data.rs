//! Synthetic radar-like events: Gaussian intensity blobs advected over a
//! periodic grid, plus the 13/12 windowing and chronological split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of observed frames fed to the forecaster.
pub const LAG: usize = 13;
/// Number of frames to forecast.
pub const LEAD: usize = 12;
pub const WINDOW: usize = LAG + LEAD;
pub const TIMESTEP_MINUTES: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Initial centre (row, column) in pixels.
    pub y: f64,
    pub x: f64,
    pub sigma: f64,
    pub amplitude: f64,
    /// Displacement per frame in pixels.
    pub vy: f64,
    pub vx: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub height: usize,
    pub width: usize,
    pub frames_per_event: usize,
    pub blobs: Vec<Blob>,
    /// Per-frame amplitude multiplier shared by all blobs.
    pub growth_rate: f64,
    pub seed: u64,
}

/// Ranges used when drawing random events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventSampler {
    pub height: usize,
    pub width: usize,
    pub frames_per_event: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub sigma: (f64, f64),
    pub amplitude: (f64, f64),
    pub max_speed: f64,
    pub growth: (f64, f64),
}

impl Default for EventSampler {
    fn default() -> Self {
        EventSampler {
            height: 32,
            width: 32,
            frames_per_event: WINDOW,
            min_blobs: 1,
            max_blobs: 4,
            sigma: (2.0, 4.0),
            amplitude: (0.35, 1.0),
            max_speed: 1.0,
            growth: (0.97, 1.03),
        }
    }
}

impl EventSampler {
    pub fn sample(&self, seed: u64) -> EventConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(self.min_blobs..=self.max_blobs);
        let blobs = (0..n)
            .map(|_| Blob {
                y: rng.gen_range(0.0..self.height as f64),
                x: rng.gen_range(0.0..self.width as f64),
                sigma: rng.gen_range(self.sigma.0..=self.sigma.1),
                amplitude: rng.gen_range(self.amplitude.0..=self.amplitude.1),
                vy: rng.gen_range(-self.max_speed..=self.max_speed),
                vx: rng.gen_range(-self.max_speed..=self.max_speed),
            })
            .collect();
        EventConfig {
            height: self.height,
            width: self.width,
            frames_per_event: self.frames_per_event,
            blobs,
            growth_rate: rng.gen_range(self.growth.0..=self.growth.1),
            seed,
        }
    }
}

/// A `[T, H, W]` field with values in `[0, 1]`, sampled every 5 minutes.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarSequence {
    pub frames: Tensor,
}

impl RadarSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 3 {
            return Err(Error::invalid(
                "radar_sequence",
                format!("expected [T,H,W], got {:?}", frames.shape()),
            ));
        }
        Ok(RadarSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[13, H, W]` observed frames.
    pub past: Tensor,
    /// `[12, H, W]` frames to predict.
    pub future: Tensor,
}

// Signed distance on a ring of circumference `n`, in (-n/2, n/2].
fn wrap(d: f64, n: f64) -> f64 {
    let r = d.rem_euclid(n);
    if r > n / 2.0 {
        r - n
    } else {
        r
    }
}

pub fn generate_event(config: &EventConfig) -> RadarSequence {
    let (h, w, t) = (config.height, config.width, config.frames_per_event);
    let mut data = vec![0.0; t * h * w];
    for k in 0..t {
        let growth = config.growth_rate.powi(k as i32);
        let frame = &mut data[k * h * w..(k + 1) * h * w];
        for b in &config.blobs {
            let cy = b.y + b.vy * k as f64;
            let cx = b.x + b.vx * k as f64;
            let amp = b.amplitude * growth;
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for y in 0..h {
                let dy = wrap(y as f64 - cy, h as f64);
                for x in 0..w {
                    let dx = wrap(x as f64 - cx, w as f64);
                    frame[y * w + x] += amp * (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
        frame.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    RadarSequence {
        frames: Tensor::new([t, h, w], data).expect("sized by construction"),
    }
}

/// Windows of 13 past + 12 future frames starting every `stride` frames.
pub fn extract_windows(event: &RadarSequence, stride: usize) -> Result<Vec<SampleWindow>> {
    if stride == 0 {
        return Err(Error::invalid("extract_windows", "stride must be ≥ 1"));
    }
    let n = event.len();
    if n < WINDOW {
        return Ok(Vec::new());
    }
    (0..=n - WINDOW)
        .step_by(stride)
        .map(|s| {
            Ok(SampleWindow {
                past: event.frames.slice_outer(s, s + LAG)?,
                future: event.frames.slice_outer(s + LAG, s + WINDOW)?,
            })
        })
        .collect()
}

pub fn window_count(len: usize, stride: usize) -> usize {
    if len < WINDOW || stride == 0 {
        0
    } else {
        (len - WINDOW) / stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Order-preserving partition: val gets `floor(r1·n)`, test `floor(r2·n)`,
/// train the remainder (so a single event still lands in train).
pub fn split_chronological<T>(events: Vec<T>, ratios: (f64, f64, f64)) -> Result<Split<T>> {
    if events.is_empty() {
        return Err(Error::invalid("split_chronological", "no events to split"));
    }
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split_chronological",
            format!("ratios {ratios:?} must be non-negative and sum to 1"),
        ));
    }
    let n = events.len();
    // Nudge before flooring so 0.2·10 lands on 2, not 1.999….
    let n_val = ((b * n as f64) + 1e-9).floor() as usize;
    let n_test = ((c * n as f64) + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut rest = events;
    let test = rest.split_off(n_train + n_val);
    let val = rest.split_off(n_train);
    Ok(Split {
        train: rest,
        val,
        test,
    })
}

/// Draws `n` events with seeds derived from `base_seed`, in generation order.
pub fn generate_events(sampler: &EventSampler, n: usize, base_seed: u64) -> Vec<(EventConfig, RadarSequence)> {
    let mut seeder = ChaCha8Rng::seed_from_u64(base_seed);
    let seeds: Vec<u64> = (0..n).map(|_| seeder.gen()).collect();
    crate::par::map_slice(&seeds, |&s| {
        let cfg = sampler.sample(s);
        let seq = generate_event(&cfg);
        (cfg, seq)
    })
}
