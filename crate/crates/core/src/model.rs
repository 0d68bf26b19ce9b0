//! Frozen attention-only backbone and exact gradients of the gate objective.
//!
//! Each layer adds the output of its heads to the residual stream:
//!
//! ```text
//! x^{l+1}_t = x^l_t + sum_h Wo_h sum_{i <= t} a_{t,i} Wv_h x^l_i
//! logit_{t,i} = (Wq x_t . Wk x_i) / sqrt(d) - slope_h (t - i) + (t - i) log beta_i
//! ```
//!
//! The teacher is the same network with every `beta = 1`. Only the gates
//! receive gradients; the backbone is borrowed immutably throughout.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{quality_term, CapBudget, GateActivation, GateInput, GateParams};
use crate::numerics::{axpy, dot, log_sigmoid, logsumexp, sigmoid, softmax, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_gate: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.heads, self.d_model, self.d_head, self.d_gate, self.vocab, self.seq_len];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }

    /// Length of the vector a gate reads.
    pub fn gate_input_dim(&self, input: GateInput) -> usize {
        match input {
            GateInput::Embedding => self.d_model,
            GateInput::KeyValue => 2 * self.d_head,
        }
    }

    /// Entries held by a full cache at the end of a sequence.
    pub fn full_cache_entries(&self) -> usize {
        self.seq_len * self.total_heads()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// Linear recency bias subtracted per position of distance.
    pub slope: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone<T> {
    pub shape: ModelShape,
    pub embed: Matrix<T>,
    pub heads: Vec<HeadWeights<T>>,
    pub unembed: Matrix<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Gaussian weights, for gradient checks and property tests.
    pub fn random(shape: ModelShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let mut m = |r: usize, c: usize, std: f64| Matrix::from_fn(r, c, |_, _| T::lit(std * rng.sample::<f64, _>(StandardNormal)));
        let sd = 1.0 / (shape.d_model as f64).sqrt();
        let sh = 1.0 / (shape.d_head as f64).sqrt();
        let embed = m(shape.vocab, shape.d_model, 1.0);
        let heads = (0..shape.total_heads())
            .map(|_| HeadWeights {
                wq: m(shape.d_head, shape.d_model, sd),
                wk: m(shape.d_head, shape.d_model, sd),
                wv: m(shape.d_head, shape.d_model, sd),
                wo: m(shape.d_model, shape.d_head, sh),
                slope: T::lit(0.1),
            })
            .collect();
        let unembed = m(shape.vocab, shape.d_model, sd);
        let b = Self { shape, embed, heads, unembed };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        s.validate()?;
        let ok = self.embed.rows() == s.vocab
            && self.embed.cols() == s.d_model
            && self.unembed.rows() == s.vocab
            && self.unembed.cols() == s.d_model
            && self.heads.len() == s.total_heads()
            && self.heads.iter().all(|h| {
                [&h.wq, &h.wk, &h.wv].iter().all(|m| m.rows() == s.d_head && m.cols() == s.d_model)
                    && h.wo.rows() == s.d_model
                    && h.wo.cols() == s.d_head
                    && h.slope >= T::zero()
            });
        if !ok {
            return Err(Error::Shape("backbone weights do not match the model shape".into()));
        }
        Ok(())
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights<T> {
        &self.heads[layer * self.shape.heads + head]
    }

    pub fn scale(&self) -> T {
        T::one() / T::from_usize_lossy(self.shape.d_head).sqrt()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.shape.vocab) {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: self.shape.vocab,
            });
        }
        Ok(())
    }

    pub fn check_gates(&self, gates: &GateParams<T>) -> Result<()> {
        if gates.layers != self.shape.layers
            || gates.heads != self.shape.heads
            || gates.d_in != self.shape.gate_input_dim(gates.input)
        {
            return Err(Error::Shape("gates do not fit the backbone".into()));
        }
        Ok(())
    }
}

/// Builds the vector a gate reads for one token.
pub fn gate_input<T: Scalar>(input: GateInput, x: &[T], k: &[T], v: &[T]) -> Vec<T> {
    match input {
        GateInput::Embedding => x.to_vec(),
        GateInput::KeyValue => k.iter().chain(v).copied().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<T> {
    pub q: Vec<Vec<T>>,
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub gate_in: Vec<Vec<T>>,
    pub gate: Vec<GateActivation<T>>,
    pub log_beta: Vec<T>,
    /// `1 - beta`, kept separately because it is tiny near initialisation.
    pub one_minus_beta: Vec<T>,
    /// Row `t` holds the weights of query `t` over positions `0..=t`.
    pub attn: Vec<Vec<T>>,
}

impl<T: Scalar> HeadTrace<T> {
    pub fn betas(&self) -> Vec<T> {
        self.log_beta.iter().map(|l| l.exp()).collect()
    }
}

/// Every intermediate of a teacher-forced pass over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTrace<T> {
    /// Residual stream entering each layer.
    pub inputs: Vec<Vec<Vec<T>>>,
    /// Indexed `layer * heads + head`.
    pub heads: Vec<HeadTrace<T>>,
    pub logits: Vec<Vec<T>>,
}

impl<T: Scalar> SeqTrace<T> {
    /// Retention scores as a `(layers * heads) x seq_len` matrix.
    pub fn beta_matrix(&self) -> Matrix<T> {
        let rows: Vec<Vec<T>> = self.heads.iter().map(HeadTrace::betas).collect();
        let cols = rows.first().map_or(0, Vec::len);
        Matrix::from_rows(&rows, cols).expect("equal lengths")
    }
}

/// Teacher-forced pass over a whole sequence. Without gates every `beta` is 1.
pub fn forward_sequence<T: Scalar>(bb: &Backbone<T>, gates: Option<&GateParams<T>>, tokens: &[usize]) -> Result<SeqTrace<T>> {
    bb.check_tokens(tokens)?;
    if let Some(g) = gates {
        bb.check_gates(g)?;
    }
    let s = bb.shape;
    let n = tokens.len();
    let scale = bb.scale();
    let mut x: Vec<Vec<T>> = tokens.iter().map(|&t| bb.embed.row(t).to_vec()).collect();
    let mut inputs = Vec::with_capacity(s.layers);
    let mut heads = Vec::with_capacity(s.total_heads());
    for l in 0..s.layers {
        let mut next = x.clone();
        for h in 0..s.heads {
            let w = bb.head(l, h);
            let q: Vec<Vec<T>> = x.iter().map(|xi| w.wq.matvec(xi)).collect();
            let k: Vec<Vec<T>> = x.iter().map(|xi| w.wk.matvec(xi)).collect();
            let v: Vec<Vec<T>> = x.iter().map(|xi| w.wv.matvec(xi)).collect();
            let mut gate_in = Vec::new();
            let mut gate = Vec::new();
            let mut log_beta = vec![T::zero(); n];
            let mut one_minus_beta = vec![T::zero(); n];
            if let Some(g) = gates {
                for i in 0..n {
                    let gi = gate_input(g.input, &x[i], &k[i], &v[i]);
                    let act = g.activation(&gi, l, h)?;
                    log_beta[i] = log_sigmoid(act.u);
                    one_minus_beta[i] = sigmoid(-act.u);
                    gate_in.push(gi);
                    gate.push(act);
                }
            }
            let mut attn = Vec::with_capacity(n);
            let mut logits = Vec::with_capacity(n);
            for t in 0..n {
                logits.clear();
                for i in 0..=t {
                    let age = T::from_usize_lossy(t - i);
                    logits.push(dot(&q[t], &k[i]) * scale - w.slope * age + age * log_beta[i]);
                }
                let a = softmax(&logits)?;
                let mut o = vec![T::zero(); s.d_head];
                for (ai, vi) in a.iter().zip(&v) {
                    axpy(*ai, vi, &mut o);
                }
                let delta = w.wo.matvec(&o);
                axpy(T::one(), &delta, &mut next[t]);
                attn.push(a);
            }
            heads.push(HeadTrace {
                q,
                k,
                v,
                gate_in,
                gate,
                log_beta,
                one_minus_beta,
                attn,
            });
        }
        inputs.push(std::mem::replace(&mut x, next));
    }
    let logits = x.iter().map(|xi| bb.unembed.matvec(xi)).collect();
    Ok(SeqTrace { inputs, heads, logits })
}

/// Backpropagates `d_logits` (one row per position) and extra pre-sigmoid
/// gradients `d_u[head][position]` to the gate parameters.
pub fn backward_sequence<T: Scalar>(
    bb: &Backbone<T>,
    gates: &GateParams<T>,
    trace: &SeqTrace<T>,
    d_logits: &[Vec<T>],
    d_u: &[Vec<T>],
) -> Result<GateParams<T>> {
    let s = bb.shape;
    let n = trace.logits.len();
    if d_logits.len() != n || d_u.len() != s.total_heads() || trace.heads.iter().any(|h| h.gate.len() != n) {
        return Err(Error::Shape("gradient inputs do not match the trace".into()));
    }
    let scale = bb.scale();
    let mut grad = gates.zeros_like();
    let mut dx: Vec<Vec<T>> = d_logits.iter().map(|g| bb.unembed.matvec_t(g)).collect();
    for l in (0..s.layers).rev() {
        let mut dx_in = dx.clone();
        for h in 0..s.heads {
            let idx = l * s.heads + h;
            let w = bb.head(l, h);
            let ht = &trace.heads[idx];
            let mut dq = vec![vec![T::zero(); s.d_head]; n];
            let mut dk = vec![vec![T::zero(); s.d_head]; n];
            let mut dv = vec![vec![T::zero(); s.d_head]; n];
            let mut dlogb = vec![T::zero(); n];
            for t in 0..n {
                let d_out = w.wo.matvec_t(&dx[t]);
                let a = &ht.attn[t];
                let da: Vec<T> = (0..=t).map(|i| dot(&d_out, &ht.v[i])).collect();
                let mean: T = a.iter().zip(&da).map(|(x, y)| *x * *y).sum();
                for i in 0..=t {
                    axpy(a[i], &d_out, &mut dv[i]);
                    let ds = a[i] * (da[i] - mean);
                    if ds != T::zero() {
                        axpy(ds * scale, &ht.k[i], &mut dq[t]);
                        axpy(ds * scale, &ht.q[t], &mut dk[i]);
                        dlogb[i] = dlogb[i] + ds * T::from_usize_lossy(t - i);
                    }
                }
            }
            let ro = gates.readout_index(idx);
            let p = &gates.proj[idx];
            let r = &gates.readout[ro];
            for i in 0..n {
                let du = dlogb[i] * ht.one_minus_beta[i] + d_u[idx][i];
                if du == T::zero() {
                    continue;
                }
                let act = &ht.gate[i];
                {
                    let gr = &mut grad.readout[ro];
                    axpy(du, &act.proj, &mut gr.w);
                    gr.b = gr.b + du;
                }
                let dproj: Vec<T> = r.w.iter().map(|w| *w * du).collect();
                let dhidden = p.w2.matvec_t(&dproj);
                let da1: Vec<T> = dhidden.iter().zip(&act.hidden).map(|(d, hv)| *d * (T::one() - *hv * *hv)).collect();
                let gp = &mut grad.proj[idx];
                gp.w2.add_outer(T::one(), &dproj, &act.hidden);
                axpy(T::one(), &dproj, &mut gp.b2);
                gp.w1.add_outer(T::one(), &da1, &ht.gate_in[i]);
                axpy(T::one(), &da1, &mut gp.b1);
                if l > 0 || gates.input == GateInput::KeyValue {
                    let dgin = p.w1.matvec_t(&da1);
                    match gates.input {
                        GateInput::Embedding => axpy(T::one(), &dgin, &mut dx_in[i]),
                        GateInput::KeyValue => {
                            axpy(T::one(), &dgin[..s.d_head], &mut dk[i]);
                            axpy(T::one(), &dgin[s.d_head..], &mut dv[i]);
                        }
                    }
                }
            }
            // The embedding is frozen, so nothing below the first layer needs dx.
            if l > 0 {
                for i in 0..n {
                    axpy(T::one(), &w.wq.matvec_t(&dq[i]), &mut dx_in[i]);
                    axpy(T::one(), &w.wk.matvec_t(&dk[i]), &mut dx_in[i]);
                    axpy(T::one(), &w.wv.matvec_t(&dv[i]), &mut dx_in[i]);
                }
            }
        }
        dx = dx_in;
    }
    Ok(grad)
}

/// One training sequence: tokens plus the positions whose next token is scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Sample {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.positions.len() != self.targets.len() {
            return Err(Error::Shape("positions and targets differ in length".into()));
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= self.tokens.len()) {
            return Err(Error::IndexOutOfRange {
                index: p,
                len: self.tokens.len(),
            });
        }
        if let Some(&t) = self.targets.iter().chain(&self.tokens).find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange { index: t, len: vocab });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub quality: f64,
    pub cap: f64,
    pub total: f64,
}

/// Teacher output distributions at the scored positions of a sample.
pub fn teacher_logits<T: Scalar>(bb: &Backbone<T>, sample: &Sample) -> Result<Vec<Vec<T>>> {
    let trace = forward_sequence(bb, None, &sample.tokens)?;
    Ok(sample.positions.iter().map(|&p| trace.logits[p].clone()).collect())
}

/// Gradient of the capacity hinge with respect to every gate pre-activation.
fn cap_grad<T: Scalar>(trace: &SeqTrace<T>, budget: CapBudget, lambda: T) -> (T, Vec<Vec<T>>) {
    let n = trace.logits.len();
    let heads = trace.heads.len();
    // mass[h][t] = sum_{i <= t} beta_i^(t - i)
    let mass: Vec<Vec<T>> = trace
        .heads
        .iter()
        .map(|ht| {
            (0..n)
                .map(|t| (0..=t).map(|i| (T::from_usize_lossy(t - i) * ht.log_beta[i]).exp()).sum())
                .collect()
        })
        .collect();
    let mut active = vec![vec![false; n]; heads];
    let mut loss = T::zero();
    match budget {
        CapBudget::Global(m) => {
            let m = T::lit(m);
            for t in 0..n {
                let total: T = mass.iter().map(|row| row[t]).sum();
                if total > m {
                    loss = loss + total - m;
                    active.iter_mut().for_each(|a| a[t] = true);
                }
            }
        }
        CapBudget::PerHead(m) => {
            let m = T::lit(m);
            for (h, row) in mass.iter().enumerate() {
                for t in 0..n {
                    if row[t] > m {
                        loss = loss + row[t] - m;
                        active[h][t] = true;
                    }
                }
            }
        }
    }
    let d_u = trace
        .heads
        .iter()
        .enumerate()
        .map(|(h, ht)| {
            (0..n)
                .map(|i| {
                    // d beta^a / du = a beta^a (1 - beta)
                    let mut acc = T::zero();
                    for t in i + 1..n {
                        if active[h][t] {
                            let a = T::from_usize_lossy(t - i);
                            acc = acc + a * (a * ht.log_beta[i]).exp();
                        }
                    }
                    lambda * acc * ht.one_minus_beta[i]
                })
                .collect()
        })
        .collect();
    (loss, d_u)
}

/// Loss of one sample and, optionally, its gate gradient.
pub fn sample_loss<T: Scalar>(
    bb: &Backbone<T>,
    gates: &GateParams<T>,
    sample: &Sample,
    teacher: &[Vec<T>],
    lambda: T,
    budget: CapBudget,
    with_grad: bool,
) -> Result<(T, T, Option<GateParams<T>>)> {
    if teacher.len() != sample.positions.len() {
        return Err(Error::Shape("teacher rows do not match scored positions".into()));
    }
    let trace = forward_sequence(bb, Some(gates), &sample.tokens)?;
    let count = T::from_usize_lossy(sample.positions.len().max(1));
    let mut quality = T::zero();
    let mut d_logits = vec![vec![T::zero(); bb.shape.vocab]; sample.tokens.len()];
    for ((&p, &y), tl) in sample.positions.iter().zip(&sample.targets).zip(teacher) {
        let student = &trace.logits[p];
        quality = quality + quality_term(tl, student, y)?;
        if with_grad {
            // d/dz [KL(p || q) - log q_y] = 2 q - p - e_y
            let lq = logsumexp(student);
            let lp = logsumexp(tl);
            for (c, d) in d_logits[p].iter_mut().enumerate() {
                let q = (student[c] - lq).exp();
                let pt = (tl[c] - lp).exp();
                let e = if c == y { T::one() } else { T::zero() };
                *d = *d + (q + q - pt - e) / count;
            }
        }
    }
    quality = quality / count;
    let (cap, d_u) = cap_grad(&trace, budget, lambda);
    if !(quality.is_finite() && cap.is_finite()) {
        return Err(Error::NonFinite("sample loss".into()));
    }
    let grad = if with_grad {
        Some(backward_sequence(bb, gates, &trace, &d_logits, &d_u)?)
    } else {
        None
    };
    Ok((quality, cap, grad))
}

/// Mean loss and gradient over a batch. Per-sample work runs in parallel and
/// is reduced in sample order, so results do not depend on scheduling.
pub fn batch_loss_and_grad<T: Scalar>(
    bb: &Backbone<T>,
    gates: &GateParams<T>,
    batch: &[(&Sample, &[Vec<T>])],
    lambda: T,
    budget: CapBudget,
) -> Result<(LossParts, GateParams<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(T, T, Option<GateParams<T>>)> = batch
        .par_iter()
        .map(|(s, t)| sample_loss(bb, gates, s, t, lambda, budget, true))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut grad = gates.zeros_like();
    let (mut q, mut c) = (T::zero(), T::zero());
    for (qi, ci, gi) in &parts {
        q = q + *qi;
        c = c + *ci;
        grad.add_assign(gi.as_ref().expect("requested"))?;
    }
    grad.scale(inv);
    let quality = (q * inv).as_f64();
    let cap = (c * inv).as_f64();
    Ok((
        LossParts {
            quality,
            cap,
            total: quality + lambda.as_f64() * cap,
        },
        grad,
    ))
}
