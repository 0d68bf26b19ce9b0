//! Frozen-backbone gate training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{CapBudget, GateParams};
use crate::model::{batch_loss_and_grad, teacher_logits, Backbone, LossParts, Sample};
use crate::scalar::Scalar;

/// Loss above which training is considered to have diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Training budget; kept tighter than the budgets evaluated later.
    pub budget: CapBudget,
    /// Shuffling seed. Run configs derive it from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rescale the gradient to at most this global norm before each update.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 8,
            lr: 0.005,
            lambda: 1e-4,
            budget: CapBudget::Global(32.0),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-12,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("lr must be positive and lambda non-negative".into()));
        }
        let m = match self.budget {
            CapBudget::Global(m) | CapBudget::PerHead(m) => m,
        };
        if !(m >= 0.0) {
            return Err(Error::Config("budget must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            let g = g.as_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            *p = *p - T::lit(upd);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub quality: f64,
    pub cap: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub params: GateParams<T>,
    pub curve: Vec<LossRow>,
}

/// Trains the gates on a fixed dataset, visiting it in seeded shuffled
/// minibatches. The teacher is the backbone with a full cache.
pub fn train_gates<T: Scalar>(bb: &Backbone<T>, init: GateParams<T>, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    bb.check_gates(&init)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for s in data {
        s.validate(bb.shape.vocab)?;
    }
    let teachers: Vec<Vec<Vec<T>>> = data.iter().map(|s| teacher_logits(bb, s)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let lambda = T::lit(cfg.lambda);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch: Vec<(&Sample, &[Vec<T>])> = idx.iter().map(|&i| (&data[i], teachers[i].as_slice())).collect();
        let (LossParts { quality, cap, total }, grad) = batch_loss_and_grad(bb, &params, &batch, lambda, cfg.budget)?;
        if !total.is_finite() || total > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step, loss: total });
        }
        curve.push(LossRow { step, quality, cap, total });
        let mut g = grad.to_flat();
        if let Some(c) = cfg.clip_norm {
            let norm = g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm > c {
                let s = T::lit(c / norm);
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        adam.step(&mut flat, &g, cfg.lr);
        params.set_flat(&flat)?;
    }
    params.validate()?;
    Ok(TrainOutcome { params, curve })
}

pub fn write_loss_csv<W: std::io::Write>(out: W, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
