//! Numerical checks for the dilution and persistence results.
//!
//! * near-tie dilution lower bound and the exact retention/dilution identity;
//! * relaxed top-K persistence under a stable VAR(1) query-state chain,
//!   compared against the geometric bound `A beta^n`;
//! * VAR(1) least-squares fitting with spectral-radius diagnostics;
//! * token survival curves from attention traces.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dilution, UsefulSet};
use crate::error::{Error, Result};
use crate::numerics::{softmax, softmax_log_space, Matrix};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Dilution
// ---------------------------------------------------------------------------

/// Lower bound on dilution forced by `n_near` distractors within `margin`
/// nats of the best useful logit, with `n_useful` useful tokens.
pub fn dilution_lower_bound<T: Scalar>(margin: T, n_near: usize, n_useful: usize) -> T {
    assert!(n_useful >= 1, "at least one useful token");
    let ratio = (-margin).exp() * T::from_usize_lossy(n_near) / T::from_usize_lossy(n_useful);
    ratio / (T::one() + ratio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilutionInstance<T> {
    pub logits: Vec<T>,
    pub useful: UsefulSet,
    pub margin: T,
    pub near_tie: BTreeSet<usize>,
}

impl<T: Scalar> DilutionInstance<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.logits.len();
        if self.useful.is_empty() {
            return Err(Error::InvalidArgument("useful set is empty".into()));
        }
        if let Some(&i) = self.useful.0.iter().chain(&self.near_tie).find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if self.margin < T::zero() {
            return Err(Error::InvalidArgument("margin must be non-negative".into()));
        }
        if self.near_tie.iter().any(|i| self.useful.contains(*i)) {
            return Err(Error::InvalidArgument("near-tie set overlaps the useful set".into()));
        }
        let best = self.best_useful();
        if let Some(&d) = self.near_tie.iter().find(|&&d| self.logits[d] < best - self.margin) {
            return Err(Error::InvalidArgument(format!("distractor {d} is not within the margin")));
        }
        Ok(())
    }

    fn best_useful(&self) -> T {
        self.useful.0.iter().map(|&i| self.logits[i]).fold(T::neg_infinity(), T::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck<T> {
    pub delta: T,
    pub bound: T,
    pub holds: bool,
}

/// Measures the dilution of the plain softmax and compares it to the bound.
pub fn check_prop1<T: Scalar>(instance: &DilutionInstance<T>) -> Result<BoundCheck<T>> {
    instance.validate()?;
    let weights = softmax(&instance.logits)?;
    let delta = dilution(&weights, &instance.useful)?;
    let bound = dilution_lower_bound(instance.margin, instance.near_tie.len(), instance.useful.len());
    // Rounding slack only: the inequality is exact.
    let slack = T::lit(64.0) * T::epsilon();
    Ok(BoundCheck {
        delta,
        bound,
        holds: delta + slack >= bound,
    })
}

/// Dilution after retention, from the full-cache dilution and the
/// logit-weighted retention rates of useful tokens and distractors.
pub fn retention_dilution<T: Scalar>(delta: T, rho_useful: T, rho_distractor: T) -> Result<T> {
    if rho_useful <= T::zero() {
        return Err(Error::InvalidArgument("useful retention rate must be positive".into()));
    }
    let a = rho_distractor / rho_useful;
    Ok(a * delta / ((T::one() - delta) + a * delta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck<T> {
    /// Dilution of the retention-weighted softmax, measured directly.
    pub direct: T,
    /// The same quantity from the closed-form identity.
    pub formula: T,
    pub full_delta: T,
    pub rho_useful: T,
    pub rho_distractor: T,
}

/// Computes retention-weighted dilution both directly and through the identity.
pub fn check_cor1<T: Scalar>(logits: &[T], useful: &UsefulSet, retention: &[T]) -> Result<IdentityCheck<T>> {
    if retention.len() != logits.len() {
        return Err(Error::Shape("retention weights must match logits".into()));
    }
    if retention.iter().any(|r| !(*r >= T::zero() && *r <= T::one())) {
        return Err(Error::InvalidArgument("retention weights must lie in [0, 1]".into()));
    }
    let log_r: Vec<T> = retention.iter().map(|r| r.ln()).collect();
    let direct = dilution(&softmax_log_space(logits, &log_r)?, useful)?;
    let full_delta = dilution(&softmax(logits)?, useful)?;

    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let (mut ru, mut eu, mut rd, mut ed) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (i, (&z, &r)) in logits.iter().zip(retention).enumerate() {
        let e = (z - m).exp();
        if useful.contains(i) {
            eu = eu + e;
            ru = ru + r * e;
        } else {
            ed = ed + e;
            rd = rd + r * e;
        }
    }
    if eu <= T::zero() {
        return Err(Error::InvalidArgument("useful set is empty".into()));
    }
    let rho_useful = ru / eu;
    let rho_distractor = if ed > T::zero() { rd / ed } else { T::zero() };
    let formula = retention_dilution(full_delta, rho_useful, rho_distractor)?;
    Ok(IdentityCheck {
        direct,
        formula,
        full_delta,
        rho_useful,
        rho_distractor,
    })
}

/// Random valid near-tie instance: `n_useful` useful logits, `n_near`
/// distractors inside the margin and `n_far` arbitrary others below it.
pub fn random_near_tie_instance(rng: &mut impl Rng, n_useful: usize, n_near: usize, n_far: usize, margin: f64) -> DilutionInstance<f64> {
    let best = rng.random_range(-3.0..3.0);
    let mut logits = vec![best];
    logits.extend((1..n_useful).map(|_| best - rng.random_range(0.0..4.0)));
    logits.extend((0..n_near).map(|_| best - margin + rng.random_range(0.0..(margin + 3.0))));
    logits.extend((0..n_far).map(|_| best - margin - rng.random_range(0.0..6.0)));
    DilutionInstance {
        logits,
        useful: (0..n_useful).collect(),
        margin,
        near_tie: (n_useful..n_useful + n_near).collect(),
    }
}

// ---------------------------------------------------------------------------
// VAR(1) dynamics and persistence
// ---------------------------------------------------------------------------

pub fn spectral_radius(a: &Matrix<f64>) -> f64 {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Per-block survival bound parameters from an exit probability `eps` over
/// blocks of `block` steps: `beta = (1 - eps)^(1/block)`, `A = 1 / (1 - eps)`.
pub fn block_bound(eps: f64, block: usize) -> (f64, f64) {
    let stay = 1.0 - eps;
    (stay.powf(1.0 / block as f64), 1.0 / stay)
}

/// Stable query-state chain `r' = A r + b + noise * N(0, I)` together with the
/// token whose relaxed top-K survival region is examined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceConfig {
    pub a: Matrix<f64>,
    pub b: Vec<f64>,
    pub noise_scale: f64,
    /// Compatibility vectors of every cached token, one per row.
    pub compat: Matrix<f64>,
    pub token: usize,
    pub k: usize,
    pub slack: f64,
    pub block: usize,
    /// In-region start states used to estimate the worst-case exit probability.
    pub exit_states: usize,
    /// Rollouts per start state for the exit estimate.
    pub exit_rollouts: usize,
    /// Chain steps discarded before sampling start states.
    pub burn_in: usize,
}

impl PersistenceConfig {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        if self.a.rows() != m || self.a.cols() != m || self.compat.cols() != m {
            return Err(Error::Shape("state dimension mismatch".into()));
        }
        if self.k == 0 || self.k > self.compat.rows() {
            return Err(Error::InvalidArgument(format!("K = {} with {} cached tokens", self.k, self.compat.rows())));
        }
        if self.token >= self.compat.rows() || self.block == 0 || self.slack < 0.0 {
            return Err(Error::InvalidArgument("token, block or slack out of range".into()));
        }
        let rho = spectral_radius(&self.a);
        if rho >= 1.0 {
            return Err(Error::AssumptionViolated(format!("spectral radius {rho:.4} >= 1, chain is not stable")));
        }
        Ok(())
    }

    fn step(&self, r: &[f64], rng: &mut impl Rng, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = self.b[i];
            for (j, &rj) in r.iter().enumerate() {
                s += self.a.get(i, j) * rj;
            }
            let eta: f64 = rng.sample(StandardNormal);
            *o = s + self.noise_scale * eta;
        }
    }

    /// Whether the token is within `slack` of the K-th best compatibility.
    pub fn in_region(&self, r: &[f64]) -> bool {
        let n = self.compat.rows();
        let score = |j: usize| -> f64 { self.compat.row(j).iter().zip(r).map(|(c, x)| c * x).sum() };
        let own = score(self.token);
        // Count strictly better competitors; the token is inside if fewer than
        // K tokens beat own + slack.
        let mut above = 0;
        for j in 0..n {
            if score(j) > own + self.slack {
                above += 1;
                if above >= self.k {
                    return false;
                }
            }
        }
        true
    }

    fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    /// In-region states drawn from a long stationary run.
    fn in_region_states(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut rng = Self::rng(seed, u64::MAX);
        let mut r = vec![0.0; m];
        let mut next = vec![0.0; m];
        for _ in 0..self.burn_in {
            self.step(&r, &mut rng, &mut next);
            std::mem::swap(&mut r, &mut next);
        }
        let mut out = Vec::with_capacity(count);
        let limit = count.saturating_mul(10_000).max(100_000);
        let mut tries = 0;
        while out.len() < count && tries < limit {
            self.step(&r, &mut rng, &mut next);
            std::mem::swap(&mut r, &mut next);
            if self.in_region(&r) {
                out.push(r.clone());
            }
            tries += 1;
        }
        out
    }

    fn stays_for(&self, start: &[f64], steps: usize, rng: &mut impl Rng) -> usize {
        let mut r = start.to_vec();
        let mut next = vec![0.0; r.len()];
        for n in 0..steps {
            self.step(&r, rng, &mut next);
            std::mem::swap(&mut r, &mut next);
            if !self.in_region(&r) {
                return n;
            }
        }
        steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceReport {
    pub spectral_radius: f64,
    /// Smallest empirical block-exit probability over the sampled start states.
    pub epsilon_hat: f64,
    pub beta: f64,
    pub amplitude: f64,
    /// `survival[n-1]` estimates the probability of staying in the region for `n` steps.
    pub survival: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Bound minus estimate minus three standard errors; negative marks a violation.
    pub min_margin: f64,
    pub violations: usize,
    /// No exits were observed, so the block-exit assumption does not hold.
    pub vacuous: bool,
}

/// Monte Carlo survival in the relaxed top-K region versus `A beta^n + 3 se`.
pub fn simulate_persistence(cfg: &PersistenceConfig, n_max: usize, trials: usize, seed: u64) -> Result<PersistenceReport> {
    cfg.validate()?;
    let spectral_radius = spectral_radius(&cfg.a);
    let starts = cfg.in_region_states(cfg.exit_states.max(trials), seed);
    if starts.is_empty() {
        return Err(Error::AssumptionViolated("the chain never visits the survival region".into()));
    }

    let worst_stay = starts
        .par_iter()
        .take(cfg.exit_states)
        .enumerate()
        .map(|(i, s)| {
            let mut rng = PersistenceConfig::rng(seed, i as u64);
            let stayed = (0..cfg.exit_rollouts)
                .filter(|_| cfg.stays_for(s, cfg.block, &mut rng) == cfg.block)
                .count();
            stayed as f64 / cfg.exit_rollouts as f64
        })
        .reduce(|| 0.0, f64::max);
    let epsilon_hat = 1.0 - worst_stay;

    let lifetimes: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = PersistenceConfig::rng(seed ^ 0x005e_ed0f_7a15, t as u64);
            cfg.stays_for(&starts[t % starts.len()], n_max, &mut rng)
        })
        .collect();
    let mut survival = Vec::with_capacity(n_max);
    let mut stderr = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let p = lifetimes.iter().filter(|&&l| l >= n).count() as f64 / trials as f64;
        survival.push(p);
        stderr.push((p * (1.0 - p) / trials as f64).sqrt());
    }

    let vacuous = epsilon_hat <= 0.0;
    // Every start leaves within one block: A would be infinite, so use the
    // block form (1 - eps)^floor(n / b) it relaxes, which is 1 before the
    // first block boundary and 0 after.
    let certain_exit = epsilon_hat >= 1.0;
    let (beta, amplitude) = if vacuous || certain_exit { (if vacuous { 1.0 } else { 0.0 }, 1.0) } else { block_bound(epsilon_hat, cfg.block) };
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    if !vacuous {
        for (i, (&p, &se)) in survival.iter().zip(&stderr).enumerate() {
            let n = i + 1;
            let bound = if certain_exit { f64::from(u8::from(n < cfg.block)) } else { amplitude * beta.powf(n as f64) };
            let margin = bound + 3.0 * se - p;
            min_margin = min_margin.min(margin);
            if margin < 0.0 {
                violations += 1;
            }
        }
    }
    Ok(PersistenceReport {
        spectral_radius,
        epsilon_hat,
        beta,
        amplitude,
        survival,
        stderr,
        min_margin,
        violations,
        vacuous,
    })
}

/// Random matrix rescaled to the requested spectral radius.
pub fn random_stable_matrix(rng: &mut impl Rng, m: usize, radius: f64) -> Matrix<f64> {
    let raw = Matrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rho = spectral_radius(&raw).max(1e-12);
    Matrix::from_fn(m, m, |i, j| raw.get(i, j) * radius / rho)
}

/// Random stable persistence setup of the kind used in the property sweeps.
pub fn random_persistence_config(rng: &mut impl Rng) -> PersistenceConfig {
    let m = rng.random_range(2..=5);
    let radius = rng.random_range(0.3..0.9);
    let n_tokens = rng.random_range(8..=24);
    PersistenceConfig {
        a: random_stable_matrix(rng, m, radius),
        b: (0..m).map(|_| rng.random_range(-0.3..0.3)).collect(),
        noise_scale: rng.random_range(0.5..1.5),
        compat: Matrix::from_fn(n_tokens, m, |_, _| rng.sample::<f64, _>(StandardNormal)),
        token: rng.random_range(0..n_tokens),
        k: rng.random_range(1..=4),
        slack: rng.random_range(0.0..1.0),
        block: rng.random_range(1..=3),
        exit_states: 1000,
        exit_rollouts: 1000,
        burn_in: 200,
    }
}

/// Least-squares VAR(1) fit `r_{t+1} = A r_t + b + e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Var1Fit {
    pub a: Matrix<f64>,
    pub b: Vec<f64>,
    /// One row per transition, pooled over trajectories.
    pub residuals: Matrix<f64>,
    pub spectral_radius: f64,
    pub stable: bool,
}

pub fn fit_var1(trajectories: &[Matrix<f64>]) -> Result<Var1Fit> {
    let m = trajectories
        .first()
        .map(Matrix::cols)
        .ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
    if trajectories.iter().any(|t| t.cols() != m) {
        return Err(Error::Shape("trajectories differ in state dimension".into()));
    }
    if let Some(t) = trajectories.iter().find(|t| t.rows() < m + 1) {
        return Err(Error::InvalidArgument(format!("trajectory with {} steps, need at least {}", t.rows(), m + 1)));
    }
    let rows: usize = trajectories.iter().map(|t| t.rows() - 1).sum();
    let mut x = DMatrix::<f64>::zeros(rows, m + 1);
    let mut y = DMatrix::<f64>::zeros(rows, m);
    let mut r = 0;
    for t in trajectories {
        for s in 0..t.rows() - 1 {
            for j in 0..m {
                x[(r, j)] = t.get(s, j);
                y[(r, j)] = t.get(s + 1, j);
            }
            x[(r, m)] = 1.0;
            r += 1;
        }
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(Error::Singular);
    }
    let theta = svd.solve(&y, smax * 1e-12).map_err(|_| Error::Singular)?;
    let resid = &y - &x * &theta;
    let a = Matrix::from_fn(m, m, |i, j| theta[(j, i)]);
    let b = (0..m).map(|i| theta[(m, i)]).collect();
    let residuals = Matrix::from_fn(rows, m, |i, j| resid[(i, j)]);
    let spectral_radius = spectral_radius(&a);
    Ok(Var1Fit {
        a,
        b,
        residuals,
        spectral_radius,
        stable: spectral_radius < 1.0,
    })
}

/// Simulates one trajectory of length `steps` from the zero state.
pub fn simulate_var1(a: &Matrix<f64>, b: &[f64], noise: f64, steps: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let m = b.len();
    let mut out = Matrix::zeros(0, m);
    let mut r = vec![0.0; m];
    for _ in 0..steps {
        out.push_row(&r).expect("state width");
        let mut next = b.to_vec();
        for (i, n) in next.iter_mut().enumerate() {
            for (j, &rj) in r.iter().enumerate() {
                *n += a.get(i, j) * rj;
            }
            *n += noise * rng.sample::<f64, _>(StandardNormal);
        }
        r = next;
    }
    out
}

/// Projects rows of `states` onto the top `k` principal directions of their
/// pooled covariance.
pub fn pca_project(states: &Matrix<f64>, k: usize) -> Result<Matrix<f64>> {
    let (n, d) = (states.rows(), states.cols());
    if k == 0 || k > d || n < 2 {
        return Err(Error::InvalidArgument(format!("cannot take {k} components of {n}x{d} data")));
    }
    let data = DMatrix::from_row_slice(n, d, states.as_slice());
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let basis = DMatrix::from_fn(d, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let proj = centered * basis;
    Ok(Matrix::from_fn(n, k, |i, j| proj[(i, j)]))
}

/// Ordinary least squares helper kept for diagnostics: returns the residual
/// standard deviation per state coordinate.
pub fn residual_scale(fit: &Var1Fit) -> Vec<f64> {
    let r = &fit.residuals;
    (0..r.cols())
        .map(|j| {
            let col = DVector::from_iterator(r.rows(), (0..r.rows()).map(|i| r.get(i, j)));
            (col.norm_squared() / r.rows().max(1) as f64).sqrt()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Survival analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    TopK(usize),
    /// Smallest set whose attention mass reaches the threshold.
    Mass(f64),
}

impl Criterion {
    pub fn label(&self) -> String {
        match self {
            Criterion::TopK(k) => format!("top{k}"),
            Criterion::Mass(t) => format!("mass{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub birth: usize,
    pub selections: Vec<usize>,
    pub criterion: Criterion,
}

impl SurvivalRecord {
    /// Selected by some query at least `horizon` positions after birth.
    pub fn alive_at(&self, horizon: usize) -> bool {
        self.selections.iter().any(|&p| p >= self.birth + horizon)
    }
}

/// Positions picked by `criterion` from one query's weights. Ties resolve
/// toward the lower position so larger budgets always pick supersets.
pub fn select<T: Scalar>(weights: &[T], criterion: Criterion) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    match criterion {
        Criterion::TopK(k) => order.truncate(k),
        Criterion::Mass(tau) => {
            let tau = T::lit(tau);
            let mut mass = T::zero();
            let mut cut = order.len();
            for (n, &i) in order.iter().enumerate() {
                mass = mass + weights[i];
                if mass >= tau {
                    cut = n + 1;
                    break;
                }
            }
            order.truncate(cut);
        }
    }
    order
}

/// Builds survival records from a causal attention trace: row `p` holds the
/// query at position `p`'s weights over positions `0..=p`.
pub fn records_from_trace<T: Scalar>(trace: &[Vec<T>], criterion: Criterion) -> Vec<SurvivalRecord> {
    let mut records: Vec<SurvivalRecord> = (0..trace.len())
        .map(|birth| SurvivalRecord {
            birth,
            selections: Vec::new(),
            criterion,
        })
        .collect();
    for (p, w) in trace.iter().enumerate() {
        for i in select(w, criterion) {
            records[i].selections.push(p);
        }
    }
    records
}

/// Fraction of records alive at each horizon.
pub fn survival_curve(records: &[SurvivalRecord], horizons: &[usize]) -> Vec<f64> {
    if records.is_empty() {
        return vec![0.0; horizons.len()];
    }
    horizons
        .iter()
        .map(|&h| records.iter().filter(|r| r.alive_at(h)).count() as f64 / records.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    /// Empty for the pooled curve.
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub criterion: String,
    pub horizon: usize,
    pub fraction: f64,
}
