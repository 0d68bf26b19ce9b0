//! Token-by-token decoding over a paged KV cache with a pluggable eviction
//! policy, plus accuracy accounting for the needle task.
//!
//! Every token is appended to each (layer, head) cache with the retention
//! score its gate assigns at birth, attends over whatever that head still
//! holds (itself included), and is then offered to the policy with the rest
//! of the cache: compression at step `t` treats token `t` as old.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::{EvictionConfig, Evictor, Policy, TraceRow};
use crate::gates::GateParams;
use crate::model::{gate_input, Backbone, Sample};
use crate::numerics::{axpy, dot, sigmoid, softmax};
use crate::paged_cache::{PagedCache, DEFAULT_PAGE_SIZE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub page_size: usize,
    /// Keep every head's attention row at every step.
    pub record_attention: bool,
    /// Keep the per-entry eviction trace.
    pub record_trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            record_attention: false,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub predictions: Vec<usize>,
    pub correct: usize,
    /// Cache entries left after each step's compression.
    pub retained: Vec<usize>,
    pub peak_entries: usize,
    pub peak_pages: usize,
    /// `attention[head][t][i]`: weight of query `t` on position `i <= t`,
    /// zero for entries no longer cached.
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
    pub trace: Vec<TraceRow>,
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes one sample under `policy`. Policies that rank by retention need
/// gates; without them every score is 1.
pub fn decode<T: Scalar>(
    bb: &Backbone<T>,
    gates: Option<&GateParams<T>>,
    sample: &Sample,
    policy: Policy,
    cfg: &EvictionConfig,
    opts: DecodeOptions,
) -> Result<Decoded> {
    bb.check_tokens(&sample.tokens)?;
    sample.validate(bb.shape.vocab)?;
    if let Some(g) = gates {
        bb.check_gates(g)?;
    }
    if gates.is_none() && matches!(policy, Policy::Global | Policy::PerHead) {
        return Err(Error::Config(format!("policy {} needs trained gates", policy.name())));
    }
    let s = bb.shape;
    let n = sample.tokens.len();
    let scale = bb.scale();
    let mut cache = PagedCache::<T>::new(s.layers, s.heads, s.d_head, opts.page_size, None)?;
    let mut evictor = Evictor::new(policy, cfg.clone(), s.total_heads())?;
    let scored: BTreeMap<usize, usize> = sample.positions.iter().copied().zip(sample.targets.iter().copied()).collect();
    let mut out = Decoded {
        predictions: Vec::with_capacity(scored.len()),
        correct: 0,
        retained: Vec::with_capacity(n),
        peak_entries: 0,
        peak_pages: 0,
        attention: opts.record_attention.then(|| vec![Vec::with_capacity(n); s.total_heads()]),
        trace: Vec::new(),
    };
    for t in 0..n {
        let mut x = bb.embed.row(sample.tokens[t]).to_vec();
        for l in 0..s.layers {
            let mut next = x.clone();
            for h in 0..s.heads {
                let w = bb.head(l, h);
                let q = w.wq.matvec(&x);
                let k = w.wk.matvec(&x);
                let v = w.wv.matvec(&x);
                let beta = match gates {
                    Some(g) => sigmoid(g.activation(&gate_input(g.input, &x, &k, &v), l, h)?.u),
                    None => T::one(),
                };
                cache.append(l, h, &k, &v, t, beta)?;
                let held = cache.gather(l, h)?;
                let logits: Vec<T> = (0..held.births.len())
                    .map(|i| dot(&q, held.keys.row(i)) * scale - w.slope * T::from_usize_lossy(t - held.births[i]))
                    .collect();
                let a = softmax(&logits)?;
                let mut o = vec![T::zero(); s.d_head];
                for (i, ai) in a.iter().enumerate() {
                    axpy(*ai, held.values.row(i), &mut o);
                }
                axpy(T::one(), &w.wo.matvec(&o), &mut next);
                if let Some(att) = out.attention.as_mut() {
                    let mut row = vec![0.0; t + 1];
                    for (b, ai) in held.births.iter().zip(&a) {
                        row[*b] = ai.as_f64();
                    }
                    att[l * s.heads + h].push(row);
                }
            }
            x = next;
        }
        if let Some(&y) = scored.get(&t) {
            let pred = argmax(&bb.unembed.matvec(&x));
            out.predictions.push(pred);
            out.correct += usize::from(pred == y);
        }
        if let Some(c) = evictor.step(&cache.candidates(), t)? {
            let mut by_head: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for e in &c.evicted {
                by_head.entry((e.layer, e.head)).or_default().push(e.token_birth);
            }
            for ((l, h), births) in by_head {
                cache.evict(l, h, &births)?;
            }
            if opts.record_trace {
                out.trace.extend(TraceRow::from_compression(&c));
            }
        }
        out.retained.push(cache.total_entries());
    }
    out.peak_entries = cache.peak_entries();
    out.peak_pages = cache.peak_pages();
    Ok(out)
}

/// One line of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    /// Global entry budget; empty for the full cache.
    pub budget: Option<usize>,
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    pub mean_retained: f64,
    pub peak_entries: usize,
    pub peak_pages: usize,
    pub seconds: f64,
}

/// Accuracy of `policy` at `budget` total entries over `samples`.
pub fn evaluate<T: Scalar>(
    bb: &Backbone<T>,
    gates: Option<&GateParams<T>>,
    samples: &[Sample],
    policy: Policy,
    budget: Option<usize>,
    base: &EvictionConfig,
) -> Result<EvalRow> {
    let cfg = EvictionConfig {
        m_global: budget.unwrap_or(usize::MAX),
        ..base.clone()
    };
    let start = Instant::now();
    let runs: Vec<Decoded> = samples
        .par_iter()
        .map(|s| decode(bb, gates, s, policy, &cfg, DecodeOptions::default()))
        .collect::<Result<_>>()?;
    let scored: usize = samples.iter().map(|s| s.positions.len()).sum();
    let correct: usize = runs.iter().map(|r| r.correct).sum();
    let steps: usize = runs.iter().map(|r| r.retained.len()).sum();
    let retained: usize = runs.iter().flat_map(|r| &r.retained).sum();
    Ok(EvalRow {
        policy: policy.name().to_string(),
        budget,
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        correct,
        scored,
        mean_retained: if steps == 0 { 0.0 } else { retained as f64 / steps as f64 },
        peak_entries: runs.iter().map(|r| r.peak_entries).max().unwrap_or(0),
        peak_pages: runs.iter().map(|r| r.peak_pages).max().unwrap_or(0),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{GateInit, GateInput};
    use crate::model::{forward_sequence, ModelShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Backbone<f64>, GateParams<f64>, Sample) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ModelShape {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            d_gate: 4,
            vocab: 6,
            seq_len: 20,
        };
        let bb = Backbone::random(shape, &mut rng).unwrap();
        let init = GateInit { bias: 1.0, readout_std: 1.0 };
        let g = GateParams::init(2, 2, 8, 4, GateInput::Embedding, true, init, &mut rng).unwrap();
        let tokens: Vec<usize> = (0..20).map(|_| rng.random_range(0..6)).collect();
        let sample = Sample {
            tokens,
            positions: vec![5, 12, 19],
            targets: vec![0, 1, 2],
        };
        (bb, g, sample)
    }

    #[test]
    fn full_cache_decode_matches_teacher_forward() {
        let (bb, g, sample) = setup();
        let opts = DecodeOptions {
            record_attention: true,
            ..Default::default()
        };
        let d = decode(&bb, Some(&g), &sample, Policy::FullCache, &EvictionConfig::default(), opts).unwrap();
        let tr = forward_sequence(&bb, None, &sample.tokens).unwrap();
        let att = d.attention.unwrap();
        for (h, ht) in tr.heads.iter().enumerate() {
            for (t, row) in ht.attn.iter().enumerate() {
                for (a, b) in row.iter().zip(&att[h][t]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        for (p, pred) in sample.positions.iter().zip(&d.predictions) {
            assert_eq!(*pred, argmax(&tr.logits[*p]));
        }
        assert_eq!(d.retained.last(), Some(&(20 * 4)));
    }

    #[test]
    fn budget_is_respected_and_large_budget_is_exact() {
        let (bb, g, sample) = setup();
        let cfg = EvictionConfig {
            m_global: 10,
            ..Default::default()
        };
        let opts = DecodeOptions {
            record_trace: true,
            ..Default::default()
        };
        for policy in [Policy::Global, Policy::PerHead, Policy::Recency] {
            let d = decode(&bb, Some(&g), &sample, policy, &cfg, opts).unwrap();
            assert!(d.retained.iter().all(|&r| r <= 10));
            assert!(d.peak_entries <= 10 + 4);
            assert!(!d.trace.is_empty());
        }
        let full = decode(&bb, Some(&g), &sample, Policy::FullCache, &EvictionConfig::default(), DecodeOptions::default()).unwrap();
        let big = EvictionConfig {
            m_global: 20 * 4,
            ..Default::default()
        };
        for policy in [Policy::Global, Policy::PerHead, Policy::Recency] {
            let d = decode(&bb, Some(&g), &sample, policy, &big, DecodeOptions::default()).unwrap();
            assert_eq!(d.predictions, full.predictions);
        }
    }

    #[test]
    fn retention_policies_need_gates() {
        let (bb, _, sample) = setup();
        let r = decode(&bb, None, &sample, Policy::Global, &EvictionConfig::default(), DecodeOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
