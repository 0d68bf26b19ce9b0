//! Future-utility scoring and budgeted KV eviction across layers and heads.
//!
//! A cached entry `(layer, head, birth)` with retention score `beta` is worth
//! `sum_{s=now+1}^{now+horizon} beta^(s - birth)` at compression step `now`.
//! The global policy keeps the `m_global` best entries over the whole model;
//! the per-head and recency policies are the fixed-allocation baselines.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lookahead used at inference unless configured otherwise.
pub const DEFAULT_HORIZON: usize = 2;

/// Address of one cached token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryId {
    pub layer: usize,
    pub head: usize,
    pub birth: usize,
}

/// A live cache entry offered to the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<T> {
    pub id: EntryId,
    pub beta: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvictionScore<T> {
    pub layer: usize,
    pub head: usize,
    pub token_birth: usize,
    pub beta: T,
    pub score: T,
}

impl<T> EvictionScore<T> {
    pub fn id(&self) -> EntryId {
        EntryId {
            layer: self.layer,
            head: self.head,
            birth: self.token_birth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Steps(usize),
    Infinite,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::Steps(DEFAULT_HORIZON)
    }
}

/// Only one ordering exists today: score descending, then the younger token,
/// then `(layer, head)` ascending.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    NewestThenLayerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvictionConfig {
    pub m_global: usize,
    pub horizon: Horizon,
    pub cadence: usize,
    pub tie_break: TieBreak,
    /// Entries younger than this many steps are always kept. 0 disables.
    pub protect_recent: usize,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self {
            m_global: usize::MAX,
            horizon: Horizon::default(),
            cadence: 1,
            tie_break: TieBreak::default(),
            protect_recent: 0,
        }
    }
}

impl EvictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_global < 1 {
            return Err(Error::Config("m_global must be at least 1".into()));
        }
        if self.horizon == Horizon::Steps(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.cadence < 1 {
            return Err(Error::Config("cadence must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_args<T: Scalar>(beta: T, birth: usize, now: usize) {
    debug_assert!(beta >= T::zero() && beta <= T::one(), "beta {beta} outside [0, 1]");
    debug_assert!(now >= birth, "now {now} before birth {birth}");
}

/// Closed-form `sum_{s=now+1}^{now+horizon} beta^(s-birth)`.
pub fn global_score<T: Scalar>(beta: T, birth: usize, now: usize, horizon: usize) -> T {
    check_args(beta, birth, now);
    let h = T::from_usize_lossy(horizon);
    if beta >= T::one() {
        return h;
    }
    if beta <= T::zero() || horizon == 0 {
        return T::zero();
    }
    let exponent = T::from_usize_lossy(now + 1 - birth);
    // 1 - beta is exact near 1, so ln_1p keeps full precision there.
    let log_beta = (beta - T::one()).ln_1p();
    let lead = (exponent * log_beta).exp();
    let geometric = -(h * log_beta).exp_m1() / (T::one() - beta);
    lead * geometric
}

/// Infinite-horizon limit `beta^(now+1-birth) / (1 - beta)`.
pub fn global_score_infinite<T: Scalar>(beta: T, birth: usize, now: usize) -> Result<T> {
    check_args(beta, birth, now);
    if beta >= T::one() {
        return Err(Error::InvalidArgument("infinite-horizon score diverges for beta = 1".into()));
    }
    if beta <= T::zero() {
        return Ok(T::zero());
    }
    let exponent = T::from_usize_lossy(now + 1 - birth);
    Ok((exponent * (beta - T::one()).ln_1p()).exp() / (T::one() - beta))
}

/// Score under a configured horizon. `beta = 1` with an infinite horizon maps to `+inf`.
pub fn score_with_horizon<T: Scalar>(beta: T, birth: usize, now: usize, horizon: Horizon) -> T {
    match horizon {
        Horizon::Steps(h) => global_score(beta, birth, now, h),
        Horizon::Infinite => global_score_infinite(beta, birth, now).unwrap_or(T::infinity()),
    }
}

pub fn score_all<T: Scalar>(entries: &[Candidate<T>], now: usize, horizon: Horizon) -> Vec<EvictionScore<T>> {
    entries
        .par_iter()
        .map(|c| EvictionScore {
            layer: c.id.layer,
            head: c.id.head,
            token_birth: c.id.birth,
            beta: c.beta,
            score: score_with_horizon(c.beta, c.id.birth, now, horizon),
        })
        .collect()
}

/// Retention order: protected first, then higher score, younger token,
/// lower `(layer, head)`. `Less` means "keep first".
fn retention_order<T: Scalar>(a: &EvictionScore<T>, b: &EvictionScore<T>, protect_from: Option<usize>) -> Ordering {
    if let Some(cut) = protect_from {
        let pa = a.token_birth >= cut;
        let pb = b.token_birth >= cut;
        if pa != pb {
            return pb.cmp(&pa);
        }
    }
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.token_birth.cmp(&a.token_birth))
        .then_with(|| (a.layer, a.head).cmp(&(b.layer, b.head)))
}

fn protect_cutoff(cfg: &EvictionConfig, now: usize) -> Option<usize> {
    (cfg.protect_recent > 0).then(|| (now + 1).saturating_sub(cfg.protect_recent))
}

/// Splits scored entries into `(retained, evicted)` with `|retained| = min(budget, n)`.
pub fn select_top<T: Scalar>(
    mut scored: Vec<EvictionScore<T>>,
    budget: usize,
    protect_from: Option<usize>,
) -> (Vec<EvictionScore<T>>, Vec<EvictionScore<T>>) {
    if scored.len() <= budget {
        return (scored, Vec::new());
    }
    let cmp = |a: &EvictionScore<T>, b: &EvictionScore<T>| retention_order(a, b, protect_from);
    if budget == 0 {
        return (Vec::new(), scored);
    }
    scored.select_nth_unstable_by(budget - 1, cmp);
    let evicted = scored.split_off(budget);
    (scored, evicted)
}

/// Keeps the `m_global` highest-scoring entries across every layer and head.
/// Returns the retained ids in ascending order.
pub fn evict_global<T: Scalar>(entries: &[Candidate<T>], cfg: &EvictionConfig, now: usize) -> Vec<EntryId> {
    let scored = score_all(entries, now, cfg.horizon);
    let (kept, _) = select_top(scored, cfg.m_global, protect_cutoff(cfg, now));
    let mut ids: Vec<EntryId> = kept.iter().map(EvictionScore::id).collect();
    ids.sort_unstable();
    ids
}

/// Eviction rule applied at compression steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Never evict.
    FullCache,
    /// One budget shared by every layer and head, ranked by future utility.
    Global,
    /// Equal fixed budget per (layer, head), ranked by future utility within the head.
    PerHead,
    /// Equal fixed budget per (layer, head), keeping the most recent tokens.
    Recency,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::FullCache => "full_cache",
            Policy::Global => "global_retention",
            Policy::PerHead => "per_head_retention",
            Policy::Recency => "recency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Policy::FullCache, Policy::Global, Policy::PerHead, Policy::Recency]
            .into_iter()
            .find(|p| p.name() == s || format!("{p:?}").eq_ignore_ascii_case(s))
    }
}

/// Outcome of one compression event.
#[derive(Debug, Clone, PartialEq)]
pub struct Compression<T> {
    pub step: usize,
    pub retained: Vec<EvictionScore<T>>,
    pub evicted: Vec<EvictionScore<T>>,
}

/// Stateful driver that decides evictions at every `cadence`-th step and
/// remembers what it removed, so nothing ever comes back.
#[derive(Debug, Clone)]
pub struct Evictor {
    policy: Policy,
    cfg: EvictionConfig,
    heads: usize,
    evicted: HashSet<EntryId>,
}

impl Evictor {
    /// `heads` is the total number of (layer, head) caches, used to split the
    /// budget for the fixed-allocation policies.
    pub fn new(policy: Policy, cfg: EvictionConfig, heads: usize) -> Result<Self> {
        cfg.validate()?;
        if heads == 0 {
            return Err(Error::Config("at least one head required".into()));
        }
        Ok(Self {
            policy,
            cfg,
            heads,
            evicted: HashSet::new(),
        })
    }

    pub fn config(&self) -> &EvictionConfig {
        &self.cfg
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn is_compression_step(&self, now: usize) -> bool {
        now % self.cfg.cadence == 0
    }

    pub fn per_head_budget(&self) -> usize {
        (self.cfg.m_global / self.heads).max(1)
    }

    pub fn was_evicted(&self, id: &EntryId) -> bool {
        self.evicted.contains(id)
    }

    pub fn evicted_count(&self) -> usize {
        self.evicted.len()
    }

    /// Runs the policy over the live entries. Returns `None` off-cadence.
    pub fn step<T: Scalar>(&mut self, live: &[Candidate<T>], now: usize) -> Result<Option<Compression<T>>> {
        if !self.is_compression_step(now) {
            return Ok(None);
        }
        if let Some(c) = live.iter().find(|c| self.evicted.contains(&c.id)) {
            return Err(Error::InvalidArgument(format!("evicted entry {:?} offered again", c.id)));
        }
        let protect = protect_cutoff(&self.cfg, now);
        let (retained, evicted) = match self.policy {
            Policy::FullCache => (score_all(live, now, self.cfg.horizon), Vec::new()),
            Policy::Global => select_top(score_all(live, now, self.cfg.horizon), self.cfg.m_global, protect),
            Policy::PerHead | Policy::Recency => {
                let budget = self.per_head_budget();
                let mut groups: BTreeMap<(usize, usize), Vec<EvictionScore<T>>> = BTreeMap::new();
                for s in score_all(live, now, self.cfg.horizon) {
                    groups.entry((s.layer, s.head)).or_default().push(s);
                }
                let mut kept = Vec::new();
                let mut gone = Vec::new();
                for (_, mut g) in groups {
                    if self.policy == Policy::Recency {
                        // Rank by age only.
                        for s in g.iter_mut() {
                            s.score = T::zero();
                        }
                    }
                    let (k, e) = select_top(g, budget, protect);
                    kept.extend(k);
                    gone.extend(e);
                }
                (kept, gone)
            }
        };
        self.evicted.extend(evicted.iter().map(EvictionScore::id));
        Ok(Some(Compression {
            step: now,
            retained,
            evicted,
        }))
    }
}

/// One row of the optional eviction trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub token_birth: usize,
    pub score: f64,
    pub action: TraceAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceAction {
    Retain,
    Evict,
}

impl TraceRow {
    pub fn from_compression<T: Scalar>(c: &Compression<T>) -> Vec<TraceRow> {
        let row = |s: &EvictionScore<T>, action| TraceRow {
            step: c.step,
            layer: s.layer,
            head: s.head,
            token_birth: s.token_birth,
            score: s.score.as_f64(),
            action,
        };
        let mut rows: Vec<TraceRow> = c
            .retained
            .iter()
            .map(|s| row(s, TraceAction::Retain))
            .chain(c.evicted.iter().map(|s| row(s, TraceAction::Evict)))
            .collect();
        rows.sort_by_key(|r| (r.layer, r.head, r.token_birth));
        rows
    }
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
