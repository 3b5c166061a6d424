//! Generic training loop shared by the flow-matching and diffusion objectives.
//!
//! Each step draws a batch from a [`Source`], builds one tape per sample
//! (per-sample gradients run data-parallel and are summed in sample order),
//! averages, clips by global norm, applies AdamW at the scheduled rate and
//! updates the EMA shadow. Optional periodic validation scores the EMA
//! weights and keeps the best checkpoint.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DropoutRng, VectorFieldNet};
use crate::nn::{clip_grad_norm, sum_grads, AdamW, Bound, LrSchedule, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// A trainable time-conditioned field `v(z, t | cond)`.
pub trait FieldModel: Sync {
    type Cond: Send + Sync;

    fn forward_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        t: f64,
        cond: &Self::Cond,
        rng: DropoutRng<'_>,
    ) -> Result<Var>;

    /// Deterministic evaluation outside training.
    fn eval(&self, store: &ParamStore, z: &Tensor, t: f64, cond: &Self::Cond) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward_vars(&mut tape, &p, zv, t, cond, None)?;
        Ok(tape.value(out).clone())
    }
}

impl FieldModel for VectorFieldNet {
    type Cond = Tensor;

    fn forward_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        t: f64,
        cond: &Tensor,
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let past = tape.constant(cond.clone());
        VectorFieldNet::forward_vars(self, tape, p, z, t, past, rng)
    }
}

/// Per-sample loss construction for one training objective.
pub trait Objective: Sync {
    fn name(&self) -> &'static str;

    fn sample_loss<M: FieldModel>(
        &self,
        model: &M,
        tape: &mut Tape,
        p: &Bound,
        target: &Tensor,
        cond: &M::Cond,
        rng: &mut ChaCha8Rng,
        train_mode: bool,
    ) -> Result<Var>;
}

/// Training data: either a finite indexed set or an unbounded generator.
pub trait Source: Sync {
    type Cond: Send + Sync;

    /// Number of items, `None` for generators.
    fn len(&self) -> Option<usize>;

    /// Item `index` (ignored by generators, which draw from `rng`).
    fn item(&self, index: usize, rng: &mut ChaCha8Rng) -> (Tensor, Self::Cond);
}

/// In-memory `(target, cond)` pairs.
#[derive(Clone, Debug, Default)]
pub struct PairSource<C> {
    pub items: Vec<(Tensor, C)>,
}

impl<C: Clone + Send + Sync> Source for PairSource<C> {
    type Cond = C;

    fn len(&self) -> Option<usize> {
        Some(self.items.len())
    }

    fn item(&self, index: usize, _rng: &mut ChaCha8Rng) -> (Tensor, C) {
        self.items[index].clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub warmup_start_ratio: f64,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// Validate every this many steps (0 disables).
    pub eval_every: usize,
    /// Disable dropout during training.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 8,
            lr: 5e-4,
            weight_decay: 1e-4,
            warmup_fraction: 0.01,
            warmup_start_ratio: 0.1,
            min_lr_ratio: 0.01,
            grad_clip: 1.0,
            ema_decay: 0.999,
            eval_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("train_config", "steps and batch must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train_config", "lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("train_config", "ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.steps, self.warmup_fraction, self.warmup_start_ratio, self.min_lr_ratio)
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[Tensor], decay: f64) -> Self {
        Ema { decay, shadow: params.to_vec() }
    }

    /// `shadow ← decay·shadow + (1−decay)·params`.
    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::invalid("ema_update", "parameter count changed"));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(Error::shape("ema_update", s.shape(), p.shape()));
            }
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub csi_m_val: Option<f64>,
}

pub const LOG_CSV_HEADER: &str = "step,epoch,loss,lr,grad_norm,csi_m_val";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{LOG_CSV_HEADER}");
    for r in rows {
        let v = r.csi_m_val.map_or(String::new(), |v| format!("{v:.9}"));
        let _ = writeln!(s, "{},{},{:.12e},{:.12e},{:.12e},{v}", r.step, r.epoch, r.loss, r.lr, r.grad_norm);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub step: usize,
    pub score: Option<f64>,
}

/// Index of the highest-scoring candidate; ties go to the earliest step and
/// undefined scores rank last.
pub fn select_checkpoint(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("select_checkpoint", "no candidates"));
    }
    let key = |c: &Candidate| c.score.unwrap_or(f64::NEG_INFINITY);
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let (a, b) = (key(c), key(&candidates[best]));
        if a > b || (a == b && c.step < candidates[best].step) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub log: Vec<LogRow>,
    pub candidates: Vec<Candidate>,
    /// EMA weights of the selected checkpoint (final EMA when no validation ran).
    pub best: ParamStore,
    pub best_step: usize,
}

/// Validation hook scoring a set of EMA weights (higher is better).
pub type Validator<'a> = dyn FnMut(&ParamStore) -> Result<Option<f64>> + 'a;

/// Batch order for finite sources: reshuffled once per epoch.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Sampler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.order.is_empty() {
            return 0;
        }
        if self.cursor == self.order.len() {
            self.cursor = 0;
            self.epoch += 1;
            self.order.shuffle(rng);
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

pub fn train<M, S, O>(
    model: &M,
    store: &ParamStore,
    source: &S,
    objective: &O,
    cfg: &TrainConfig,
    seed: u64,
    mut validate: Option<&mut Validator<'_>>,
) -> Result<TrainOutcome>
where
    M: FieldModel<Cond = S::Cond>,
    S: Source,
    O: Objective,
{
    cfg.validate()?;
    if source.len() == Some(0) {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut store = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let mut ema = Ema::new(store.tensors(), cfg.ema_decay);
    let mut sampler = Sampler { order: (0..source.len().unwrap_or(0)).collect(), cursor: 0, epoch: 0 };
    sampler.order.shuffle(&mut rng);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut candidates = Vec::new();
    let mut best: Option<(usize, ParamStore)> = None;
    let mut ema_store = store.clone();

    for step in 0..cfg.steps {
        let batch: Vec<(usize, u64)> = (0..cfg.batch).map(|_| (sampler.next(&mut rng), rng.gen())).collect();
        let results = crate::par::try_map_indices(batch.len(), |j| -> Result<(f64, Vec<Tensor>)> {
            let (index, sample_seed) = batch[j];
            let mut srng = ChaCha8Rng::seed_from_u64(sample_seed);
            let (target, cond) = source.item(index, &mut srng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let loss = objective.sample_loss(model, &mut tape, &p, &target, &cond, &mut srng, !cfg.deterministic)?;
            let value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            Ok((value, store.collect_grads(&p, &mut grads)))
        })?;
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        let lr = schedule.lr(step);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!(
                    "{} loss {loss} at lr {lr:e}; last finite loss {:?}",
                    objective.name(),
                    log.last().map(|r: &LogRow| r.loss)
                ),
            });
        }
        let mut grads = sum_grads(results.into_iter().map(|r| r.1).collect()).expect("batch is non-empty");
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut store, &grads, lr);
        ema.update(store.tensors())?;

        let mut row = LogRow { step, epoch: sampler.epoch, loss, lr, grad_norm, csi_m_val: None };
        let due = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        if let (true, Some(v)) = (due, validate.as_deref_mut()) {
            ema_store.load_values(ema.shadow.clone())?;
            let score = v(&ema_store)?;
            row.csi_m_val = score;
            candidates.push(Candidate { step, score });
            if select_checkpoint(&candidates)? == candidates.len() - 1 {
                best = Some((step, ema_store.clone()));
            }
        }
        log.push(row);
    }

    ema_store.load_values(ema.shadow)?;
    let (best_step, best) = best.unwrap_or((cfg.steps - 1, ema_store.clone()));
    Ok(TrainOutcome { params: store, ema: ema_store, log, candidates, best, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_identities() {
        let params = vec![Tensor::full([3], 2.0)];
        let mut e = Ema::new(&[Tensor::zeros([3])], 0.0);
        e.update(&params).unwrap();
        assert_eq!(e.shadow, params);
        let mut e = Ema::new(&[Tensor::zeros([3])], 1.0);
        e.update(&params).unwrap();
        assert_eq!(e.shadow[0], Tensor::zeros([3]));
        let mut e = Ema::new(&[Tensor::zeros([3])], 0.5);
        e.update(&params).unwrap();
        assert_eq!(e.shadow[0], Tensor::full([3], 1.0));
        assert!(e.update(&[Tensor::zeros([2])]).is_err());
    }

    #[test]
    fn checkpoint_selection() {
        let c = |step, score| Candidate { step, score: Some(score) };
        assert_eq!(select_checkpoint(&[c(0, 0.3)]).unwrap(), 0);
        assert_eq!(select_checkpoint(&[c(0, 0.2), c(1, 0.5), c(2, 0.4)]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[c(0, 0.5), c(1, 0.5)]).unwrap(), 0);
        assert_eq!(select_checkpoint(&[Candidate { step: 0, score: None }, c(1, 0.0)]).unwrap(), 1);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let rows = [LogRow { step: 0, epoch: 0, loss: 1.5, lr: 1e-3, grad_norm: 0.5, csi_m_val: None }];
        let csv = log_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOG_CSV_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 6);
    }
}
