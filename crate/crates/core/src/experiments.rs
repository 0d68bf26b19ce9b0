//! Experiment drivers behind the command-line subcommands, plus the writers
//! for their outputs. Everything here runs in f64.
//!
//! Outputs are checked before they are written and land atomically: each file
//! is written next to its destination and renamed into place.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::UsefulSet;
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::engine::{decode, evaluate, DecodeOptions, EvalRow};
use crate::error::{Error, Result};
use crate::eviction::{EvictionConfig, Policy};
use crate::gates::{read_checkpoint, write_checkpoint, GateParams};
use crate::model::{Backbone, Sample};
use crate::numerics::Matrix;
use crate::theory::{
    check_cor1, check_prop1, fit_var1, random_near_tie_instance, random_persistence_config, random_stable_matrix, records_from_trace,
    simulate_persistence, simulate_var1, spectral_radius, survival_curve, Criterion, SurvivalRecord, SurvivalRow,
};
use crate::train::{train_gates, write_loss_csv, LossRow, TrainOutcome};

// Named seed streams of a run.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_EVAL_DATA: u64 = 2;
const STREAM_GATE_INIT: u64 = 3;
const STREAM_SURVIVAL_DATA: u64 = 4;
const STREAM_THEORY: u64 = 5;

/// Tolerance of the retention identity check.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Final dilution the sweep must reach.
pub const SWEEP_FINAL_DELTA: f64 = 0.99;

pub fn backbone(cfg: &RunConfig) -> Result<Backbone<f64>> {
    cfg.wiring.build(&cfg.needle)
}

pub fn train_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    cfg.needle.dataset(cfg.data.train_samples, cfg.stream_seed(STREAM_TRAIN_DATA))
}

pub fn eval_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    cfg.needle.dataset(cfg.data.eval_samples, cfg.stream_seed(STREAM_EVAL_DATA))
}

pub fn initial_gates(cfg: &RunConfig) -> Result<GateParams<f64>> {
    let s = cfg.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed(STREAM_GATE_INIT));
    GateParams::init(s.layers, s.heads, s.gate_input_dim(cfg.gates.input), s.d_gate, cfg.gates.input, cfg.gates.tied, cfg.gates.init, &mut rng)
}

// ---------------------------------------------------------------------------
// Theory suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub instances: usize,
    pub violations: usize,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub instances: usize,
    pub violations: usize,
    /// Smallest `delta - bound` seen.
    pub min_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub distractors: usize,
    pub delta: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistenceStatus {
    Checked,
    /// No exits observed: the block-exit assumption fails and the bound says nothing.
    Vacuous,
    AssumptionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceSummary {
    pub index: usize,
    pub status: PersistenceStatus,
    pub reason: Option<String>,
    pub dim: usize,
    pub k: usize,
    pub block: usize,
    pub spectral_radius: f64,
    pub epsilon_hat: Option<f64>,
    pub beta: Option<f64>,
    pub amplitude: Option<f64>,
    pub min_margin: Option<f64>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarFitSummary {
    pub configured_radius: f64,
    pub fitted_radii: Vec<f64>,
    pub median_radius: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub version: u32,
    pub seed: u64,
    pub identity: IdentitySummary,
    pub bound: BoundSummary,
    pub sweep: Vec<SweepPoint>,
    pub sweep_monotone: bool,
    pub persistence: Vec<PersistenceSummary>,
    pub var_fit: VarFitSummary,
    /// Persistence setups rejected because their assumptions fail.
    pub assumption_violations: usize,
    /// Failed checks over every suite.
    pub violations: usize,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.assumption_violations == 0
    }
}

fn identity_suite(cfg: &RunConfig, rng: &mut impl Rng) -> Result<IdentitySummary> {
    let t = &cfg.theory;
    let mut out = IdentitySummary {
        instances: t.instances,
        violations: 0,
        max_abs_error: 0.0,
    };
    for _ in 0..t.instances {
        let n = rng.random_range(2..=t.max_tokens);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let k = rng.random_range(1..=n / 2);
        let useful: UsefulSet = sample_indices(rng, n, k).into_iter().collect();
        let mut retention: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let first = *useful.0.iter().next().expect("non-empty");
        retention[first] = rng.random_range(0.05..=1.0);
        let c = check_cor1(&logits, &useful, &retention)?;
        let err = (c.direct - c.formula).abs();
        out.max_abs_error = out.max_abs_error.max(err);
        if !(err <= IDENTITY_TOL) {
            out.violations += 1;
        }
    }
    Ok(out)
}

fn bound_suite(cfg: &RunConfig, rng: &mut impl Rng) -> Result<BoundSummary> {
    let mut out = BoundSummary {
        instances: cfg.theory.instances,
        violations: 0,
        min_margin: f64::INFINITY,
    };
    for _ in 0..cfg.theory.instances {
        let (n_useful, n_near, n_far) = (rng.random_range(1..=4), rng.random_range(1..=40), rng.random_range(0..=20));
        let margin = rng.random_range(0.0..3.0);
        let inst = random_near_tie_instance(rng, n_useful, n_near, n_far, margin);
        let c = check_prop1(&inst)?;
        out.min_margin = out.min_margin.min(c.delta - c.bound);
        if !c.holds {
            out.violations += 1;
        }
    }
    Ok(out)
}

fn sweep_suite(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Vec<SweepPoint>> {
    cfg.theory
        .sweep
        .iter()
        .map(|&n| {
            let c = check_prop1(&random_near_tie_instance(rng, 2, n, 0, cfg.theory.sweep_margin))?;
            Ok(SweepPoint {
                distractors: n,
                delta: c.delta,
                bound: c.bound,
            })
        })
        .collect()
}

fn persistence_suite(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Vec<PersistenceSummary>> {
    let t = &cfg.theory;
    (0..t.persistence_configs)
        .map(|index| {
            let mut pc = random_persistence_config(rng);
            pc.exit_states = t.exit_states;
            pc.exit_rollouts = t.exit_rollouts;
            if let Some(r) = t.persistence_radius {
                let rho = spectral_radius(&pc.a).max(1e-12);
                pc.a = Matrix::from_fn(pc.dim(), pc.dim(), |i, j| pc.a.get(i, j) * r / rho);
            }
            let seed = rng.random();
            let mut row = PersistenceSummary {
                index,
                status: PersistenceStatus::Checked,
                reason: None,
                dim: pc.dim(),
                k: pc.k,
                block: pc.block,
                spectral_radius: spectral_radius(&pc.a),
                epsilon_hat: None,
                beta: None,
                amplitude: None,
                min_margin: None,
                violations: 0,
            };
            match simulate_persistence(&pc, t.n_max, t.trials, seed) {
                Ok(rep) => {
                    row.epsilon_hat = Some(rep.epsilon_hat);
                    if rep.vacuous {
                        row.status = PersistenceStatus::Vacuous;
                    } else {
                        row.beta = Some(rep.beta);
                        row.amplitude = Some(rep.amplitude);
                        row.min_margin = Some(rep.min_margin);
                        row.violations = rep.violations;
                    }
                }
                Err(Error::AssumptionViolated(reason)) => {
                    row.status = PersistenceStatus::AssumptionViolated;
                    row.reason = Some(reason);
                }
                Err(e) => return Err(e),
            }
            Ok(row)
        })
        .collect()
}

fn var_fit_suite(cfg: &RunConfig, rng: &mut impl Rng) -> Result<VarFitSummary> {
    let t = &cfg.theory;
    let mut fitted = Vec::with_capacity(t.var_fits);
    for _ in 0..t.var_fits {
        let a = random_stable_matrix(rng, t.var_dim, t.var_radius);
        let b: Vec<f64> = (0..t.var_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        let trajectories: Vec<Matrix<f64>> = (0..t.var_trajectories).map(|_| simulate_var1(&a, &b, 1.0, t.var_steps, rng)).collect();
        fitted.push(fit_var1(&trajectories)?.spectral_radius);
    }
    let mut sorted = fitted.clone();
    sorted.sort_by(f64::total_cmp);
    let median_radius = sorted[sorted.len() / 2];
    Ok(VarFitSummary {
        configured_radius: t.var_radius,
        fitted_radii: fitted,
        median_radius,
        tolerance: t.var_tolerance,
        within_tolerance: (median_radius - t.var_radius).abs() <= t.var_tolerance,
    })
}

/// Runs every theory check. Bound failures are counted, not raised;
/// persistence setups whose assumptions fail are reported as such.
pub fn run_theory_suite(cfg: &RunConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed(STREAM_THEORY));
    let identity = identity_suite(cfg, &mut rng)?;
    let bound = bound_suite(cfg, &mut rng)?;
    let sweep = sweep_suite(cfg, &mut rng)?;
    let sweep_monotone = sweep.windows(2).all(|w| w[1].delta > w[0].delta);
    let sweep_ok = sweep_monotone && sweep.last().is_none_or(|p| p.delta > SWEEP_FINAL_DELTA);
    let persistence = persistence_suite(cfg, &mut rng)?;
    let var_fit = var_fit_suite(cfg, &mut rng)?;
    let assumption_violations = persistence.iter().filter(|p| p.status == PersistenceStatus::AssumptionViolated).count();
    let violations = identity.violations
        + bound.violations
        + usize::from(!sweep_ok)
        + persistence.iter().map(|p| p.violations).sum::<usize>()
        + usize::from(!var_fit.within_tolerance);
    Ok(TheoryReport {
        version: SCHEMA_VERSION,
        seed: cfg.seed,
        identity,
        bound,
        sweep,
        sweep_monotone,
        persistence,
        var_fit,
        assumption_violations,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Training, evaluation, survival
// ---------------------------------------------------------------------------

/// Trains gates on the run's training set from the run's initialisation.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome<f64>> {
    cfg.validate()?;
    let bb = backbone(cfg)?;
    train_gates(&bb, initial_gates(cfg)?, &train_data(cfg)?, &cfg.train_config())
}

/// One row per (policy, budget) cell; the full cache gets a single row.
pub fn run_eval(cfg: &RunConfig, gates: Option<&GateParams<f64>>) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let bb = backbone(cfg)?;
    let data = eval_data(cfg)?;
    let base = EvictionConfig {
        m_global: usize::MAX,
        ..cfg.eviction.clone()
    };
    let mut rows = Vec::new();
    for &policy in &cfg.eval.policies {
        if policy == Policy::FullCache {
            rows.push(evaluate(&bb, gates, &data, policy, None, &base)?);
            continue;
        }
        for &budget in &cfg.eval.budgets {
            rows.push(evaluate(&bb, gates, &data, policy, Some(budget), &base)?);
        }
    }
    Ok(rows)
}

/// Criteria in the order their curves are emitted.
pub fn survival_criteria(cfg: &RunConfig) -> Vec<Criterion> {
    let mut out: Vec<Criterion> = cfg.survival.top_k.iter().map(|&k| Criterion::TopK(k)).collect();
    out.extend(cfg.survival.mass.iter().map(|&m| Criterion::Mass(m)));
    out
}

/// Full-cache attention of every head on the survival samples:
/// `[sample][layer * heads + head][query][position]`.
pub fn survival_traces(cfg: &RunConfig) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    cfg.validate()?;
    let bb = backbone(cfg)?;
    let data = cfg.needle.dataset(cfg.survival.samples, cfg.stream_seed(STREAM_SURVIVAL_DATA))?;
    let opts = DecodeOptions {
        record_attention: true,
        page_size: cfg.eval.page_size,
        ..Default::default()
    };
    data.iter()
        .map(|s| {
            let d = decode(&bb, None, s, Policy::FullCache, &EvictionConfig::default(), opts)?;
            d.attention.ok_or_else(|| Error::InvalidArgument("decode did not record attention".into()))
        })
        .collect()
}

/// Survival curves per head and pooled over heads, from full-cache decodes
/// of the toy model.
pub fn run_survival(cfg: &RunConfig) -> Result<Vec<SurvivalRow>> {
    let traces = survival_traces(cfg)?;
    let shape = cfg.shape();
    let horizons = &cfg.survival.horizons;
    let mut rows = Vec::new();
    for criterion in survival_criteria(cfg) {
        let mut pooled: Vec<SurvivalRecord> = Vec::new();
        for idx in 0..shape.total_heads() {
            let records: Vec<SurvivalRecord> = traces.iter().flat_map(|t| records_from_trace(&t[idx], criterion)).collect();
            let curve = survival_curve(&records, horizons);
            rows.extend(horizons.iter().zip(curve).map(|(&horizon, fraction)| SurvivalRow {
                layer: Some(idx / shape.heads),
                head: Some(idx % shape.heads),
                criterion: criterion.label(),
                horizon,
                fraction,
            }));
            pooled.extend(records);
        }
        let curve = survival_curve(&pooled, horizons);
        rows.extend(horizons.iter().zip(curve).map(|(&horizon, fraction)| SurvivalRow {
            layer: None,
            head: None,
            criterion: criterion.label(),
            horizon,
            fraction,
        }));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} = {v} outside [0, 1]")))
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

pub fn check_eval_rows(rows: &[EvalRow]) -> Result<()> {
    for r in rows {
        check_fraction("accuracy", r.accuracy)?;
        check_finite("mean_retained", r.mean_retained)?;
        if r.correct > r.scored || Policy::parse(&r.policy).is_none() {
            return Err(Error::InvalidArgument(format!("malformed eval row {r:?}")));
        }
    }
    Ok(())
}

pub fn check_loss_rows(rows: &[LossRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.step != i {
            return Err(Error::InvalidArgument(format!("loss row {i} has step {}", r.step)));
        }
        check_finite("quality", r.quality)?;
        check_finite("cap", r.cap)?;
        check_finite("total", r.total)?;
    }
    Ok(())
}

pub fn check_survival_rows(rows: &[SurvivalRow]) -> Result<()> {
    rows.iter().try_for_each(|r| check_fraction("fraction", r.fraction))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_csv_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

pub fn write_json<R: Serialize>(path: &Path, value: &R) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    check_eval_rows(rows)?;
    write_csv_rows(path, rows)
}

pub fn write_survival_csv(path: &Path, rows: &[SurvivalRow]) -> Result<()> {
    check_survival_rows(rows)?;
    write_csv_rows(path, rows)
}

pub fn write_loss_curve(path: &Path, rows: &[LossRow]) -> Result<()> {
    check_loss_rows(rows)?;
    let mut bytes = Vec::new();
    write_loss_csv(&mut bytes, rows)?;
    write_atomic(path, &bytes)
}

pub fn save_gates(path: &Path, params: &GateParams<f64>, seed: u64) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, params, seed)?;
    write_atomic(path, &bytes)
}

pub fn load_gates(path: &Path) -> Result<GateParams<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(std::io::BufReader::new(file))?.0)
}
