//! Frame-wise variational autoencoder providing the 8× compressed latent
//! space, with replication padding, cropping and latent standardization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Bound, Conv3, LrSchedule, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Spatial extents fed to the encoder must be multiples of this.
pub const PAD_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub kl_weight: f64,
    /// Encoder stage widths; the decoder mirrors them.
    pub widths: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            downsample_factor: 8,
            latent_channels: 4,
            kl_weight: 1e-4,
            widths: [16, 32, 64],
        }
    }
}

/// Replicates edge rows/columns of the trailing two axes up to the next
/// multiple of `multiple`. Returns the padded field and the original `(H, W)`.
pub fn pad_replicate(field: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let s = field.shape();
    let nd = s.len();
    if nd < 2 || multiple == 0 {
        return Err(Error::invalid("pad_replicate", format!("bad field {s:?} or multiple {multiple}")));
    }
    let (h, w) = (s[nd - 2], s[nd - 1]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let lead: usize = s[..nd - 2].iter().product();
    let src = field.data();
    let mut out = Vec::with_capacity(lead * ph * pw);
    for p in 0..lead {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pw - w));
        }
    }
    let mut shape = s.to_vec();
    shape[nd - 2] = ph;
    shape[nd - 1] = pw;
    Ok((Tensor::new(shape, out)?, (h, w)))
}

/// Top-left crop of the trailing two axes.
pub fn crop(field: &Tensor, dims: (usize, usize)) -> Result<Tensor> {
    let s = field.shape();
    let nd = s.len();
    if nd < 2 || dims.0 > s[nd - 2] || dims.1 > s[nd - 1] || dims.0 == 0 || dims.1 == 0 {
        return Err(Error::invalid("crop", format!("cannot crop {s:?} to {dims:?}")));
    }
    let (h, w) = (s[nd - 2], s[nd - 1]);
    let lead: usize = s[..nd - 2].iter().product();
    let mut out = Vec::with_capacity(lead * dims.0 * dims.1);
    for p in 0..lead {
        for y in 0..dims.0 {
            let base = p * h * w + y * w;
            out.extend_from_slice(&field.data()[base..base + dims.1]);
        }
    }
    let mut shape = s.to_vec();
    shape[nd - 2] = dims.0;
    shape[nd - 1] = dims.1;
    Tensor::new(shape, out)
}

/// `mu + exp(logvar/2)·noise`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(Error::shape("reparameterize", mu.shape(), noise.shape()));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(noise.data())
        .map(|((m, l), n)| m + (l / 2.0).exp() * n)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// Per-element KL divergence to N(0, 1), averaged.
pub fn kl_mean(mu: &Tensor, logvar: &Tensor) -> f64 {
    mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum::<f64>()
        / mu.len() as f64
}

/// Mean L1 reconstruction error plus `kl_weight`·mean KL.
pub fn vae_loss(recon: &Tensor, target: &Tensor, mu: &Tensor, logvar: &Tensor, kl_weight: f64) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::shape("vae_loss", recon.shape(), target.shape()));
    }
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("vae_loss", mu.shape(), logvar.shape()));
    }
    let l1 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / recon.len() as f64;
    Ok(l1 + kl_weight * kl_mean(mu, logvar))
}

fn vae_loss_var(tape: &mut Tape, recon: Var, target: Var, mu: Var, logvar: Var, kl_weight: f64) -> Result<Var> {
    let d = tape.sub(recon, target)?;
    let a = tape.abs(d);
    let l1 = tape.mean(a);
    // ½(μ² + e^ℓ − 1 − ℓ)
    let mu2 = tape.square(mu);
    let e = tape.exp(logvar);
    let s = tape.add(mu2, e)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_const(s, -1.0);
    let kl = tape.mean(s);
    let kl = tape.scale(kl, 0.5 * kl_weight);
    tape.add(l1, kl)
}

/// Per-channel standardization statistics of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        LatentStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over every element of every latent, per channel (last axis).
    pub fn from_latents<'a>(latents: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for z in latents {
            let c = *z.shape().last().ok_or_else(|| Error::invalid("latent_stats", "scalar latent"))?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("latent_stats", &[sum.len()], &[c]));
            }
            for row in z.data().chunks(c) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            count += z.len() / c;
        }
        if count == 0 {
            return Err(Error::invalid("latent_stats", "no latents"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(LatentStats { mean, std })
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.shape().last() != Some(&self.mean.len()) {
            return Err(Error::shape("standardize", z.shape(), &[self.mean.len()]));
        }
        if let Some(i) = self.std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid("standardize", format!("channel {i} has std {}", self.std[i])));
        }
        Ok(())
    }

    pub fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let c = self.mean.len();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        Ok(out)
    }

    pub fn destandardize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let c = self.mean.len();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[i] + self.mean[i];
            }
        }
        Ok(out)
    }
}

/// Three stride-2 stages down to an 8× smaller latent grid, mirrored decoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: CodecConfig,
    enc: Vec<Conv3>,
    enc_mid: Conv3,
    enc_out: Conv3,
    dec_in: Conv3,
    dec: Vec<Conv3>,
    dec_out: Conv3,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.downsample_factor != 8 {
            return Err(Error::invalid(
                "vae",
                format!("downsample factor {} unsupported; the encoder has 3 stride-2 stages", config.downsample_factor),
            ));
        }
        let [w0, w1, w2] = config.widths;
        let lc = config.latent_channels;
        let enc = vec![
            Conv3::new(store, "enc.0", 1, w0, rng),
            Conv3::new(store, "enc.1", w0, w1, rng),
            Conv3::new(store, "enc.2", w1, w2, rng),
        ];
        let enc_mid = Conv3::new(store, "enc.mid", w2, w2, rng);
        let enc_out = Conv3::new(store, "enc.out", w2, 2 * lc, rng);
        let dec_in = Conv3::new(store, "dec.in", lc, w2, rng);
        let dec = vec![
            Conv3::new(store, "dec.0", w2, w1, rng),
            Conv3::new(store, "dec.1", w1, w0, rng),
        ];
        let dec_out = Conv3::new(store, "dec.out", w0, 1, rng);
        Ok(Vae {
            config,
            enc,
            enc_mid,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    /// `[N, 1, H, W]` → `(mu, logvar)`, each `[N, C, H/8, W/8]`.
    pub fn encode_vars(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(PAD_MULTIPLE) || !s[3].is_multiple_of(PAD_MULTIPLE) {
            return Err(Error::invalid(
                "encode",
                format!("expected [N,1,H,W] with H, W multiples of {PAD_MULTIPLE}, got {s:?}"),
            ));
        }
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
            h = tape.subsample2(h)?;
        }
        h = self.enc_mid.forward(tape, p, h)?;
        h = tape.silu(h);
        let out = self.enc_out.forward(tape, p, h)?;
        let lc = self.config.latent_channels;
        let mu = tape.narrow(out, 1, 0, lc)?;
        let logvar = tape.narrow(out, 1, lc, lc)?;
        Ok((mu, logvar))
    }

    /// `[N, C, h, w]` → `[N, 1, 8h, 8w]` clamped to `[0, 1]`.
    pub fn decode_vars(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(Error::invalid(
                "decode",
                format!("expected [N,{},h,w], got {s:?}", self.config.latent_channels),
            ));
        }
        let mut h = self.dec_in.forward(tape, p, z)?;
        h = tape.silu(h);
        for conv in &self.dec {
            h = tape.upsample2(h)?;
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        h = tape.upsample2(h)?;
        let out = self.dec_out.forward(tape, p, h)?;
        Ok(tape.clamp(out, 0.0, 1.0))
    }

    /// Encodes `[T, H, W]` frames (H, W multiples of 16) into channel-last
    /// `(mu, logvar)`, each `[T, H/8, W/8, C]`.
    pub fn encode(&self, store: &ParamStore, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = frames.shape();
        if s.len() != 3 {
            return Err(Error::invalid("encode", format!("expected [T,H,W], got {s:?}")));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(frames.clone().reshape([s[0], 1, s[1], s[2]])?);
        let (mu, lv) = self.encode_vars(&mut tape, &p, x)?;
        let mu = tape.value(mu).permute(&[0, 2, 3, 1])?;
        let lv = tape.value(lv).permute(&[0, 2, 3, 1])?;
        Ok((mu, lv))
    }

    /// Decodes channel-last `[T, h, w, C]` latents into `[T, 8h, 8w]` frames.
    pub fn decode(&self, store: &ParamStore, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 4 || s[3] != self.config.latent_channels {
            return Err(Error::invalid(
                "decode",
                format!("expected [T,h,w,{}], got {s:?}", self.config.latent_channels),
            ));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let z = tape.constant(latent.permute(&[0, 3, 1, 2])?);
        let out = self.decode_vars(&mut tape, &p, z)?;
        let v = tape.value(out).clone();
        let (t, h, w) = (s[0], v.shape()[2], v.shape()[3]);
        v.reshape([t, h, w])
    }

    /// Pads arbitrary `[T, H, W]` frames, encodes them and returns the latent
    /// means together with the original extents.
    pub fn encode_mean_padded(&self, store: &ParamStore, frames: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (padded, dims) = pad_replicate(frames, PAD_MULTIPLE)?;
        let (mu, _) = self.encode(store, &padded)?;
        Ok((mu, dims))
    }

    pub fn decode_cropped(&self, store: &ParamStore, latent: &Tensor, dims: (usize, usize)) -> Result<Tensor> {
        crop(&self.decode(store, latent)?, dims)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub warmup_start_ratio: f64,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 1500,
            batch: 16,
            lr: 2e-3,
            weight_decay: 1e-5,
            warmup_fraction: 0.2,
            warmup_start_ratio: 0.1,
            min_lr_ratio: 1e-3,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains the codec on individual `[H, W]` frames (extents multiples of 16).
pub fn train_vae(
    vae: &Vae,
    store: &mut ParamStore,
    frames: &[Tensor],
    cfg: &VaeTrainConfig,
    seed: u64,
) -> Result<Vec<VaeLogRow>> {
    if frames.is_empty() {
        return Err(Error::invalid("train_vae", "no training frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = LrSchedule::new(cfg.lr, cfg.steps, cfg.warmup_fraction, cfg.warmup_start_ratio, cfg.min_lr_ratio);
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..frames.len())).collect();
        let batch = Tensor::stack(&idx.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>())?;
        let s = batch.shape().to_vec();
        let batch = batch.reshape([s[0], 1, s[1], s[2]])?;
        let lat_shape = [s[0], vae.config.latent_channels, s[1] / 8, s[2] / 8];
        let noise = Tensor::randn(lat_shape.to_vec(), &mut rng);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(batch);
        let (mu, lv) = vae.encode_vars(&mut tape, &p, x)?;
        let n = tape.constant(noise);
        let half = tape.scale(lv, 0.5);
        let sd = tape.exp(half);
        let en = tape.mul(sd, n)?;
        let z = tape.add(mu, en)?;
        let recon = vae.decode_vars(&mut tape, &p, z)?;
        let loss = vae_loss_var(&mut tape, recon, x, mu, lv, vae.config.kl_weight)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("vae loss {loss_val}"),
            });
        }
        let mut g = tape.backward(loss)?;
        let mut grads = store.collect_grads(&p, &mut g);
        drop(tape);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = sched.lr(step);
        opt.step(store, &grads, lr);
        log.push(VaeLogRow { step, loss: loss_val, lr });
    }
    Ok(log)
}

/// Mean absolute reconstruction error of `decode(mu)` over `[H, W]` frames.
pub fn reconstruction_mae(vae: &Vae, store: &ParamStore, frames: &[Tensor]) -> Result<f64> {
    let errs = crate::par::try_map_indices(frames.len().div_ceil(32), |c| -> Result<(f64, usize)> {
        let part = &frames[c * 32..((c + 1) * 32).min(frames.len())];
        let x = Tensor::stack(part)?;
        let (padded, dims) = pad_replicate(&x, PAD_MULTIPLE)?;
        let (mu, _) = vae.encode(store, &padded)?;
        let rec = crop(&vae.decode(store, &mu)?, dims)?;
        let s: f64 = rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum();
        Ok((s, x.len()))
    })?;
    let (s, n) = errs.into_iter().fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    Ok(s / n as f64)
}

/// Draws standard-normal noise shaped like `like`.
pub fn noise_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Tensor {
    let data = (0..like.len()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(like.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vae() -> (Vae, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let vae = Vae::new(CodecConfig::default(), &mut store, &mut rng).unwrap();
        (vae, store)
    }

    #[test]
    fn padding_extents() {
        let f = Tensor::zeros([301, 401]);
        let (p, dims) = pad_replicate(&f, 16).unwrap();
        assert_eq!(p.shape(), &[304, 416]);
        assert_eq!(dims, (301, 401));
        let (p, _) = pad_replicate(&Tensor::zeros([384, 384]), 16).unwrap();
        assert_eq!(p.shape(), &[384, 384]);
        let (p, _) = pad_replicate(&Tensor::full([1, 1], 0.3), 16).unwrap();
        assert_eq!(p.shape(), &[16, 16]);
        assert!(p.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn padding_replicates_edges() {
        let f = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (p, _) = pad_replicate(&f, 4).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[1., 2., 3., 3.]);
        assert_eq!(&p.data()[12..], &[4., 5., 6., 6.]);
    }

    #[test]
    fn crop_cases() {
        let c = Tensor::full([16, 16], 0.7);
        let out = crop(&c, (3, 5)).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        assert!(out.data().iter().all(|&v| v == 0.7));
        assert_eq!(crop(&c, (16, 16)).unwrap(), c);
        assert!(crop(&c, (17, 2)).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = Tensor::full([3], 1.0);
        let n = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let z = reparameterize(&mu, &Tensor::zeros([3]), &Tensor::zeros([3])).unwrap();
        assert_eq!(z, mu);
        let z = reparameterize(&mu, &Tensor::zeros([3]), &n).unwrap();
        assert_eq!(z.data(), &[1.5, 0.0, 3.0]);
        let z = reparameterize(&mu, &Tensor::full([3], 4f64.ln()), &n).unwrap();
        for (a, b) in z.data().iter().zip([2.0, -1.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_cases() {
        let t = Tensor::full([4], 0.5);
        let z = Tensor::zeros([2]);
        assert_eq!(vae_loss(&t, &t, &z, &z, 1e-4).unwrap(), 0.0);
        let one = Tensor::full([2], 1.0);
        assert!((vae_loss(&t, &t, &one, &z, 1e-4).unwrap() - 0.5e-4).abs() < 1e-18);
        let r = Tensor::full([4], 0.6);
        assert!((vae_loss(&r, &t, &z, &z, 1e-4).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_shapes() {
        let (vae, store) = small_vae();
        let x = Tensor::uniform([2, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (mu, lv) = vae.encode(&store, &x).unwrap();
        assert_eq!(mu.shape(), &[2, 4, 4, 4]);
        assert_eq!(lv.shape(), &[2, 4, 4, 4]);
        let rec = vae.decode(&store, &mu).unwrap();
        assert_eq!(rec.shape(), &[2, 32, 32]);
        assert!(rec.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(vae.encode(&store, &Tensor::zeros([1, 30, 32])).is_err());
        assert!(vae.decode(&store, &Tensor::zeros([1, 4, 4, 3])).is_err());
    }

    #[test]
    fn encode_large_padded_frame() {
        let (vae, store) = small_vae();
        let (mu, dims) = vae.encode_mean_padded(&store, &Tensor::full([1, 301, 401], 0.2)).unwrap();
        assert_eq!(mu.shape(), &[1, 38, 52, 4]);
        assert_eq!(dims, (301, 401));
    }

    #[test]
    fn zero_weights_give_bias_field() {
        let (vae, mut store) = small_vae();
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let out_bias = vae.enc_out.b;
        store.get_mut(out_bias).data_mut().copy_from_slice(&[1., 2., 3., 4., 0., 0., 0., 0.]);
        let x = Tensor::uniform([1, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let (mu, lv) = vae.encode(&store, &x).unwrap();
        for row in mu.data().chunks(4) {
            assert_eq!(row, &[1., 2., 3., 4.]);
        }
        assert!(lv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn([3, 2, 2, 4], &mut rng);
        let stats = LatentStats::from_latents([&z]).unwrap();
        let back = stats.destandardize(&stats.standardize(&z).unwrap()).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-6);
        let id = LatentStats::identity(4);
        assert_eq!(id.standardize(&z).unwrap(), z);
        let at_mean = Tensor::new([1, 4], stats.mean.clone()).unwrap();
        assert!(stats.standardize(&at_mean).unwrap().data().iter().all(|v| v.abs() < 1e-15));
        let mut bad = stats.clone();
        bad.std[2] = 0.0;
        assert!(bad.standardize(&z).is_err());
    }
}
