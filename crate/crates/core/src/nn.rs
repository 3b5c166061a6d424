//! Parameter storage, small layers, and the AdamW optimizer shared by the
//! codec, the vector-field network and the diffusion baseline.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps tape variables given in parameter-store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        )
    }

    /// Gradient for each parameter, zero where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(bound.vars())
            .map(|(v, &var)| grads.take(var).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
            .collect()
    }

    /// Replaces all values, checking names' shapes line up.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::invalid(
                "load_values",
                format!("expected {} tensors, got {}", self.values.len(), values.len()),
            ));
        }
        for (name, (old, new)) in self.names.iter().zip(self.values.iter().zip(&values)) {
            if old.shape() != new.shape() {
                return Err(Error::invalid(
                    "load_values",
                    format!("{name}: expected {:?}, got {:?}", old.shape(), new.shape()),
                ));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Element-wise sum of gradient lists, in the given order.
pub fn sum_grads(mut parts: Vec<Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let mut acc = parts.drain(..1.min(parts.len())).next()?;
    for p in parts {
        for (a, g) in acc.iter_mut().zip(p) {
            a.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, g)| *a += g);
        }
    }
    Some(acc)
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(&[input, output], input, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]));
        Linear { w, b, input, output }
    }

    /// Same layout, weights and bias all zero.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([input, output]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(Error::shape("linear", &shape, &[self.input, self.output]));
        }
        let rows = shape.iter().product::<usize>() / self.input;
        let flat = tape.reshape(x, &[rows, self.input])?;
        let y = tape.matmul(flat, p[self.w])?;
        let y = tape.add_bias(y, p[self.b])?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.output;
        tape.reshape(y, &out_shape)
    }
}

/// Same-padded 3×3 convolution over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub k: ParamId,
    pub b: ParamId,
}

impl Conv3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let k = store.add(format!("{name}.k"), uniform_init(&[cout, cin, 3, 3], cin * 9, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Conv3 { k, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.k], Some(p[self.b]))
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, Self::EPS);
        let y = tape.mul_bias(y, p[self.gain])?;
        tape.add_bias(y, p[self.bias])
    }
}

/// Linear warmup from `warmup_start_ratio·peak` to `peak`, then cosine
/// annealing down to `min_ratio·peak` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub warmup_start_ratio: f64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn new(
        peak: f64,
        total_steps: usize,
        warmup_fraction: f64,
        warmup_start_ratio: f64,
        min_ratio: f64,
    ) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).ceil() as usize)
            .max(1)
            .min(total_steps.saturating_sub(1));
        LrSchedule {
            peak,
            total_steps,
            warmup_steps,
            warmup_start_ratio,
            min_ratio,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.peak * (self.warmup_start_ratio + (1.0 - self.warmup_start_ratio) * frac);
        }
        let last = self.total_steps.saturating_sub(1);
        let span = last.saturating_sub(self.warmup_steps);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |s: &ParamStore| s.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
                pd[i] -= lr * (update + self.weight_decay * pd[i]);
            }
        }
    }
}
