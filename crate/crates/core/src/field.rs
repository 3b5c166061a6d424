//! Time-conditioned vector field network over latent sequences.
//!
//! A small U-shaped network: a stem over `[T, h, w, C]` tokens, time
//! embedding injected by residual fusion blocks at every stage, axial
//! self-attention over time, height and width, one patch-merge downsample
//! and one nearest+conv upsample with an additive skip. The past window is
//! mapped onto the forecast frames by a learned temporal projection and
//! concatenated on channels.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_dim: usize,
    pub time_embed_multiplier: usize,
    pub attn_heads: usize,
    pub dropout: f64,
    /// Blocks per stage.
    pub depth: usize,
    /// Sinusoid width before the time MLP.
    pub time_freq_dim: usize,
    pub past_frames: usize,
    pub future_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_dim: 32,
            time_embed_multiplier: 4,
            attn_heads: 4,
            dropout: 0.1,
            depth: 1,
            time_freq_dim: 32,
            past_frames: crate::data::LAG,
            future_frames: crate::data::LEAD,
            latent_height: 4,
            latent_width: 4,
            latent_channels: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_dim == 0 || !self.base_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::invalid(
                "model_config",
                format!("base_dim {} must be a positive multiple of attn_heads {}", self.base_dim, self.attn_heads),
            ));
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::invalid("model_config", "time_freq_dim must be even"));
        }
        if !self.latent_height.is_multiple_of(2) || !self.latent_width.is_multiple_of(2) {
            return Err(Error::invalid("model_config", "latent grid must have even extents"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model_config", "dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn future_shape(&self) -> [usize; 4] {
        [self.future_frames, self.latent_height, self.latent_width, self.latent_channels]
    }

    pub fn past_shape(&self) -> [usize; 4] {
        [self.past_frames, self.latent_height, self.latent_width, self.latent_channels]
    }
}

/// Frequencies `ω_i`, geometrically spaced from 1 to 10⁴.
pub fn time_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|i| 10f64.powf(4.0 * i as f64 / (half - 1) as f64))
        .collect()
}

/// Sinusoidal embedding `[sin(t·ω), cos(t·ω)]` of width `dim`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid("time_embed", format!("dim {dim} must be even")));
    }
    let freqs = time_frequencies(dim / 2);
    let mut v: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    v.extend(freqs.iter().map(|w| (t * w).cos()));
    Tensor::new([dim], v)
}

/// Dropout mode: `None` disables it.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Multi-head self-attention along one axis of a `[T, H, W, C]` tensor.
#[derive(Clone, Debug)]
struct AxisAttention {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl AxisAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        AxisAttention {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    /// Returns the residual output and the `[groups·heads, L, L]` weights.
    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        axis: usize,
        drop: f64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let c = shape[3];
        let dh = c / self.heads;
        // Move `axis` next to channels so each row of [groups, L, C] is one sequence.
        let perm: [usize; 4] = match axis {
            0 => [1, 2, 0, 3],
            1 => [0, 2, 1, 3],
            2 => [0, 1, 2, 3],
            _ => return Err(Error::invalid("axial_attention", format!("axis {axis} out of range"))),
        };
        let len = shape[axis];
        let groups = shape.iter().take(3).product::<usize>() / len;

        let h = self.norm.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let qkv = tape.permute(qkv, &perm)?;
        let moved: Vec<usize> = tape.shape(qkv).to_vec();
        let qkv = tape.reshape(qkv, &[groups, len, 3 * c])?;

        let split_heads = |tape: &mut Tape, part: usize| -> Result<Var> {
            let v = tape.narrow(qkv, 2, part * c, c)?;
            let v = tape.reshape(v, &[groups, len, self.heads, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[groups * self.heads, len, dh])
        };
        let q = split_heads(tape, 0)?;
        let k = split_heads(tape, 1)?;
        let v = split_heads(tape, 2)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, 2)?;
        let attn = dropout(tape, weights, drop, rng)?;
        let out = tape.bmm(attn, v)?;

        let out = tape.reshape(out, &[groups, self.heads, len, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[moved[0], moved[1], moved[2], c])?;
        let out = tape.permute(out, &crate::tensor::inverse_perm(&perm))?;
        let out = self.proj.forward(tape, p, out)?;
        let out = dropout(tape, out, drop, rng)?;
        Ok((tape.add(x, out)?, weights))
    }
}

/// Axial attention over time, height, then width, followed by a GELU FFN.
#[derive(Clone, Debug)]
pub struct AxialBlock {
    passes: [AxisAttention; 3],
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl AxialBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let passes = [0, 1, 2].map(|a| AxisAttention::new(store, &format!("{name}.attn{a}"), dim, heads, rng));
        AxialBlock {
            passes,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, 2 * dim, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 2 * dim, dim, rng),
        }
    }

    /// Returns the output and the attention weights of the T, H and W passes.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        drop: f64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<(Var, [Var; 3])> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || !s[3].is_multiple_of(self.passes[0].heads) {
            return Err(Error::invalid(
                "axial_attention",
                format!("expected [T,H,W,C] with C divisible by {}, got {s:?}", self.passes[0].heads),
            ));
        }
        let mut h = x;
        let mut weights = Vec::with_capacity(3);
        for (axis, pass) in self.passes.iter().enumerate() {
            let (out, w) = pass.forward(tape, p, h, axis, drop, rng)?;
            h = out;
            weights.push(w);
        }
        let f = self.ffn_norm.forward(tape, p, h)?;
        let f = self.ffn_in.forward(tape, p, f)?;
        let f = tape.gelu(f);
        let f = self.ffn_out.forward(tape, p, f)?;
        let f = dropout(tape, f, drop, rng)?;
        let out = tape.add(h, f)?;
        Ok((out, [weights[0], weights[1], weights[2]]))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, drop: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x, drop, rng)?.0)
    }
}

/// Residual block fusing the time embedding into token features.
#[derive(Clone, Debug)]
struct TimeEmbedResBlock {
    norm: LayerNorm,
    lin1: Linear,
    temb: Linear,
    lin2: Linear,
}

impl TimeEmbedResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, temb_dim: usize, rng: &mut R) -> Self {
        TimeEmbedResBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, dim, rng),
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, dim, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), dim, dim, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        temb: Var,
        drop: f64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.lin1.forward(tape, p, h)?;
        let shift = self.temb.forward(tape, p, temb)?;
        let h = tape.add_bias(h, shift)?;
        let h = tape.silu(h);
        let h = dropout(tape, h, drop, rng)?;
        let h = self.lin2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: Vec<TimeEmbedResBlock>,
    attn: Vec<AxialBlock>,
}

impl Stage {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let temb_dim = cfg.base_dim * cfg.time_embed_multiplier;
        let res = (0..cfg.depth)
            .map(|i| TimeEmbedResBlock::new(store, &format!("{name}.res{i}"), dim, temb_dim, rng))
            .collect();
        let attn = (0..cfg.depth)
            .map(|i| AxialBlock::new(store, &format!("{name}.axial{i}"), dim, cfg.attn_heads, rng))
            .collect();
        Stage { res, attn }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        temb: Var,
        drop: f64,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        for (r, a) in self.res.iter().zip(&self.attn) {
            x = r.forward(tape, p, x, temb, drop, rng)?;
            x = a.forward(tape, p, x, drop, rng)?;
        }
        Ok(x)
    }
}

/// The learned vector field `v(z_t, t, z_past)`.
#[derive(Clone, Debug)]
pub struct VectorFieldNet {
    pub config: ModelConfig,
    temporal_proj: ParamId,
    stem: Linear,
    pos_embed: ParamId,
    time_in: Linear,
    time_out: Linear,
    enc: Stage,
    merge: Linear,
    mid: Stage,
    up_conv: crate::nn::Conv3,
    dec: Stage,
    out_norm: LayerNorm,
    out: Linear,
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.base_dim;
        let c = config.latent_channels;
        let temb_dim = d * config.time_embed_multiplier;
        let (tp, tf) = (config.past_frames, config.future_frames);
        // Every forecast frame starts as a copy of the last observed frame.
        let mut proj = Tensor::zeros([tf, tp]);
        for k in 0..tf {
            proj.data_mut()[k * tp + tp - 1] = 1.0;
        }
        let temporal_proj = store.add("temporal_proj", proj);
        let stem = Linear::new(store, "stem", 2 * c, d, rng);
        let pos_embed = store.add(
            "pos_embed",
            Tensor::uniform([tf, config.latent_height, config.latent_width, d], -0.02, 0.02, rng),
        );
        let time_in = Linear::new(store, "time.in", config.time_freq_dim, temb_dim, rng);
        let time_out = Linear::new(store, "time.out", temb_dim, temb_dim, rng);
        let enc = Stage::new(store, "enc", d, &config, rng);
        let merge = Linear::new(store, "merge", 4 * d, 2 * d, rng);
        let mid = Stage::new(store, "mid", 2 * d, &config, rng);
        let up_conv = crate::nn::Conv3::new(store, "up_conv", 2 * d, d, rng);
        let dec = Stage::new(store, "dec", d, &config, rng);
        let out_norm = LayerNorm::new(store, "out_norm", d);
        let out = Linear::zeros(store, "out", d, c);
        Ok(VectorFieldNet {
            config,
            temporal_proj,
            stem,
            pos_embed,
            time_in,
            time_out,
            enc,
            merge,
            mid,
            up_conv,
            dec,
            out_norm,
            out,
        })
    }

    /// Output-layer parameters (zero at initialization).
    pub fn output_params(&self) -> [ParamId; 2] {
        [self.out.w, self.out.b]
    }

    /// Time embedding after the MLP, `[base_dim·multiplier]`.
    pub fn time_embed(&self, tape: &mut Tape, p: &Bound, t: f64) -> Result<Var> {
        let e = tape.constant(sinusoidal_embedding(t, self.config.time_freq_dim)?);
        let e = tape.reshape(e, &[1, self.config.time_freq_dim])?;
        let h = self.time_in.forward(tape, p, e)?;
        let h = tape.silu(h);
        let h = self.time_out.forward(tape, p, h)?;
        tape.reshape(h, &[self.config.base_dim * self.config.time_embed_multiplier])
    }

    fn check_inputs(&self, z_t: &[usize], z_past: &[usize]) -> Result<()> {
        let (fs, ps) = (self.config.future_shape(), self.config.past_shape());
        if z_t != fs {
            return Err(Error::shape("vector_field", &fs, z_t));
        }
        if z_past != ps {
            return Err(Error::shape("vector_field", &ps, z_past));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Dropout is active only when
    /// `rng` is provided.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z_t: Var,
        t: f64,
        z_past: Var,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        self.check_inputs(tape.shape(z_t), tape.shape(z_past))?;
        let cfg = &self.config;
        let (tf, h, w, c, d) = (cfg.future_frames, cfg.latent_height, cfg.latent_width, cfg.latent_channels, cfg.base_dim);
        let drop = cfg.dropout;

        let past = tape.reshape(z_past, &[cfg.past_frames, h * w * c])?;
        let cond = tape.matmul(p[self.temporal_proj], past)?;
        let cond = tape.reshape(cond, &[tf, h, w, c])?;
        let x = tape.concat(&[z_t, cond], 3)?;
        let x = self.stem.forward(tape, p, x)?;
        let x = tape.add(x, p[self.pos_embed])?;

        let temb = self.time_embed(tape, p, t)?;
        let temb = tape.silu(temb);

        let skip = self.enc.forward(tape, p, x, temb, drop, &mut rng)?;

        // Patch merge: each 2×2 block of tokens becomes one token of 4·d features.
        let m = tape.reshape(skip, &[tf, h / 2, 2, w / 2, 2, d])?;
        let m = tape.permute(m, &[0, 1, 3, 2, 4, 5])?;
        let m = tape.reshape(m, &[tf, h / 2, w / 2, 4 * d])?;
        let m = self.merge.forward(tape, p, m)?;
        let m = self.mid.forward(tape, p, m, temb, drop, &mut rng)?;

        // Nearest upsample then 3×3 conv back to d channels, per frame.
        let u = tape.permute(m, &[0, 3, 1, 2])?;
        let u = tape.upsample2(u)?;
        let u = self.up_conv.forward(tape, p, u)?;
        let u = tape.permute(u, &[0, 2, 3, 1])?;
        let x = tape.add(u, skip)?;
        let x = self.dec.forward(tape, p, x, temb, drop, &mut rng)?;

        let x = self.out_norm.forward(tape, p, x)?;
        self.out.forward(tape, p, x)
    }

    /// Deterministic inference: `[12, h, w, C]` field for the given state.
    pub fn forward(&self, store: &ParamStore, z_t: &Tensor, t: f64, z_past: &Tensor) -> Result<Tensor> {
        self.check_inputs(z_t.shape(), z_past.shape())?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let zp = tape.constant(z_past.clone());
        let out = self.forward_vars(&mut tape, &p, zt, t, zp, None)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluates independent items, returning outputs in item order.
    pub fn forward_batch(&self, store: &ParamStore, items: &[(Tensor, f64, Tensor)]) -> Result<Vec<Tensor>> {
        crate::par::try_map_indices(items.len(), |i| {
            let (z, t, past) = &items[i];
            self.forward(store, z, *t, past)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_dim: 8,
            attn_heads: 2,
            time_freq_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn randomize_output(net: &VectorFieldNet, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in net.output_params() {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::uniform(s, -0.3, 0.3, rng);
        }
    }

    #[test]
    fn sinusoid_endpoints() {
        let e = sinusoidal_embedding(0.0, 8).unwrap();
        assert!(e.data()[..4].iter().all(|&v| v == 0.0));
        assert!(e.data()[4..].iter().all(|&v| v == 1.0));
        let e1 = sinusoidal_embedding(1.0, 8).unwrap();
        assert!((e1.sq_norm() - 4.0).abs() < 1e-12);
        assert_ne!(e1, e);
        assert!(sinusoidal_embedding(0.5, 7).is_err());
    }

    #[test]
    fn frequencies_are_geometric() {
        let w = time_frequencies(16);
        assert_eq!(w[0], 1.0);
        assert!((w[15] - 1e4).abs() < 1e-9);
        let r = w[1] / w[0];
        for pair in w.windows(2) {
            assert!((pair[1] / pair[0] - r).abs() < 1e-9);
        }
    }

    #[test]
    fn output_shape_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(ModelConfig::default(), &mut store, &mut rng).unwrap();
        let z = Tensor::randn([12, 4, 4, 4], &mut rng);
        let past = Tensor::randn([13, 4, 4, 4], &mut rng);
        let v = net.forward(&store, &z, 0.5, &past).unwrap();
        assert_eq!(v.shape(), z.shape());
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn time_and_past_are_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(tiny(), &mut store, &mut rng).unwrap();
        randomize_output(&net, &mut store, &mut rng);
        let z = Tensor::randn([12, 4, 4, 4], &mut rng);
        let past = Tensor::randn([13, 4, 4, 4], &mut rng);
        let a = net.forward(&store, &z, 0.2, &past).unwrap();
        let b = net.forward(&store, &z, 0.7, &past).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        let c = net.forward(&store, &z, 0.2, &Tensor::zeros([13, 4, 4, 4])).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-6);
        // Deterministic without dropout.
        assert_eq!(a, net.forward(&store, &z, 0.2, &past).unwrap());
    }

    #[test]
    fn wrong_lengths_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(tiny(), &mut store, &mut rng).unwrap();
        let z = Tensor::zeros([11, 4, 4, 4]);
        let past = Tensor::zeros([13, 4, 4, 4]);
        assert!(net.forward(&store, &z, 0.5, &past).is_err());
        let z = Tensor::zeros([12, 4, 4, 4]);
        assert!(net.forward(&store, &z, 0.5, &Tensor::zeros([12, 4, 4, 4])).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig { base_dim: 30, ..ModelConfig::default() };
        assert!(VectorFieldNet::new(cfg, &mut store, &mut rng).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = AxialBlock::new(&mut store, "b", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn([3, 4, 5, 8], &mut rng));
        let (y, ws) = block.forward_with_weights(&mut tape, &p, x, 0.0, &mut None).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 5, 8]);
        for (w, len) in ws.iter().zip([3, 4, 5]) {
            let t = tape.value(*w);
            assert_eq!(t.shape()[1..], [len, len]);
            for row in t.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singleton_attention_is_value_path() {
        // With one token per axis every softmax row is [1], so each pass adds
        // proj(v(norm(x))) exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = AxialBlock::new(&mut store, "b", 4, 2, &mut rng);
        let x0 = Tensor::randn([1, 1, 1, 4], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(x0.clone());
        let (y, ws) = block.forward_with_weights(&mut tape, &p, x, 0.0, &mut None).unwrap();
        for w in ws {
            assert_eq!(tape.value(w).data(), &[1.0, 1.0]);
        }
        let mut h = x;
        for pass in &block.passes {
            let n = pass.norm.forward(&mut tape, &p, h).unwrap();
            let qkv = pass.qkv.forward(&mut tape, &p, n).unwrap();
            let v = tape.narrow(qkv, 3, 8, 4).unwrap();
            let o = pass.proj.forward(&mut tape, &p, v).unwrap();
            h = tape.add(h, o).unwrap();
        }
        let f = block.ffn_norm.forward(&mut tape, &p, h).unwrap();
        let f = block.ffn_in.forward(&mut tape, &p, f).unwrap();
        let f = tape.gelu(f);
        let f = block.ffn_out.forward(&mut tape, &p, f).unwrap();
        let want = tape.add(h, f).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(tiny(), &mut store, &mut rng).unwrap();
        randomize_output(&net, &mut store, &mut rng);
        let items: Vec<_> = (0..2)
            .map(|i| (Tensor::randn([12, 4, 4, 4], &mut rng), 0.3 + 0.4 * i as f64, Tensor::randn([13, 4, 4, 4], &mut rng)))
            .collect();
        let fwd = net.forward_batch(&store, &items).unwrap();
        let swapped = vec![items[1].clone(), items[0].clone()];
        let rev = net.forward_batch(&store, &swapped).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(tiny(), &mut store, &mut rng).unwrap();
        randomize_output(&net, &mut store, &mut rng);
        let z = Tensor::randn([12, 4, 4, 4], &mut rng);
        let past = Tensor::randn([13, 4, 4, 4], &mut rng);
        let eval = net.forward(&store, &z, 0.5, &past).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let zt = tape.constant(z.clone());
        let zp = tape.constant(past.clone());
        let mut drng = ChaCha8Rng::seed_from_u64(8);
        let out = net.forward_vars(&mut tape, &p, zt, 0.5, zp, Some(&mut drng)).unwrap();
        assert!(tape.value(out).max_abs_diff(&eval) > 1e-9);
    }
}
