//! Retention gates, training losses and the gate checkpoint format.
//!
//! Each (layer, head) owns a two-layer projection; the scoring readout
//! `(w_g, b_g)` is shared by all of them when the gates are tied:
//!
//! ```text
//! beta_{l,h}(x) = sigmoid(w_g . Proj_{l,h}(x) + b_g)
//! Proj_{l,h}(x) = W2 tanh(W1 x + b1) + b2
//! ```
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | content                                         |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `b"RKVGATE\0"`                             |
//! | 8      | 4    | format version (`u32`, currently 1)             |
//! | 12     | 4    | header length `n` in bytes (`u32`)              |
//! | 16     | n    | UTF-8 JSON [`CheckpointHeader`]                  |
//! | 16 + n | 8·p  | `p = header.param_count` parameters as `f64`     |
//!
//! Parameters follow [`GateParams::to_flat`] order: for every (layer, head)
//! in row-major order `W1` (row-major), `b1`, `W2` (row-major), `b2`; then for
//! every readout `w`, `b`. Values are widened to `f64`, which is exact for
//! both supported scalar types, so a save/load round trip is bit-exact.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, logsumexp, retention_factor, sigmoid, Matrix};
use crate::scalar::Scalar;

/// Initial shared bias: `sigmoid(18)` keeps every token at the start.
pub const INIT_BIAS: f64 = 18.0;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RKVGATE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Nonlinearity between the two projection layers.
pub const ACTIVATION: &str = "tanh";

/// What a gate reads when a token enters the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// The token's hidden state entering the layer.
    #[default]
    Embedding,
    /// The concatenated key and value of the head.
    KeyValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateProj<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout<T> {
    pub w: Vec<T>,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams<T> {
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub d_gate: usize,
    pub input: GateInput,
    /// One per (layer, head), index `layer * heads + head`.
    pub proj: Vec<GateProj<T>>,
    /// A single shared readout when tied, otherwise one per (layer, head).
    pub readout: Vec<Readout<T>>,
}

/// Intermediate values of one gate evaluation, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivation<T> {
    pub hidden: Vec<T>,
    pub proj: Vec<T>,
    /// Pre-sigmoid score.
    pub u: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateInit {
    pub bias: f64,
    /// Standard deviation of the shared readout weights.
    pub readout_std: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        Self {
            bias: INIT_BIAS,
            readout_std: 1e-2,
        }
    }
}

impl<T: Scalar> GateParams<T> {
    pub fn init(
        layers: usize,
        heads: usize,
        d_in: usize,
        d_gate: usize,
        input: GateInput,
        tied: bool,
        init: GateInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || d_in == 0 || d_gate == 0 {
            return Err(Error::Config("gate dimensions must be positive".into()));
        }
        let mut normal = |std: f64| T::lit(std * rng.sample::<f64, _>(StandardNormal));
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_gate as f64).sqrt();
        let proj = (0..layers * heads)
            .map(|_| GateProj {
                w1: Matrix::from_fn(d_gate, d_in, |_, _| normal(s1)),
                b1: vec![T::zero(); d_gate],
                w2: Matrix::from_fn(d_gate, d_gate, |_, _| normal(s2)),
                b2: vec![T::zero(); d_gate],
            })
            .collect();
        let n_readout = if tied { 1 } else { layers * heads };
        let shared: Vec<T> = (0..d_gate).map(|_| normal(init.readout_std)).collect();
        let readout = (0..n_readout)
            .map(|_| Readout {
                w: shared.clone(),
                b: T::lit(init.bias),
            })
            .collect();
        Ok(Self {
            layers,
            heads,
            d_in,
            d_gate,
            input,
            proj,
            readout,
        })
    }

    pub fn is_tied(&self) -> bool {
        self.readout.len() == 1
    }

    pub fn index(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.layers || head >= self.heads {
            return Err(Error::IndexOutOfRange {
                index: layer * self.heads + head,
                len: self.layers * self.heads,
            });
        }
        Ok(layer * self.heads + head)
    }

    pub fn readout_index(&self, idx: usize) -> usize {
        if self.is_tied() {
            0
        } else {
            idx
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers * self.heads;
        if self.proj.len() != n || !(self.readout.len() == 1 || self.readout.len() == n) {
            return Err(Error::Shape("gate parameter counts do not match the model".into()));
        }
        for p in &self.proj {
            if p.w1.rows() != self.d_gate
                || p.w1.cols() != self.d_in
                || p.w2.rows() != self.d_gate
                || p.w2.cols() != self.d_gate
                || p.b1.len() != self.d_gate
                || p.b2.len() != self.d_gate
            {
                return Err(Error::Shape("projection shape mismatch".into()));
            }
        }
        if self.readout.iter().any(|r| r.w.len() != self.d_gate) {
            return Err(Error::Shape("readout shape mismatch".into()));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gate parameters".into()));
        }
        Ok(())
    }

    /// Runs gate `(layer, head)` on `x`, keeping the intermediates.
    pub fn activation(&self, x: &[T], layer: usize, head: usize) -> Result<GateActivation<T>> {
        let idx = self.index(layer, head)?;
        if x.len() != self.d_in {
            return Err(Error::Shape(format!("gate input of length {} vs {}", x.len(), self.d_in)));
        }
        let p = &self.proj[idx];
        let mut hidden = p.w1.matvec(x);
        for (h, b) in hidden.iter_mut().zip(&p.b1) {
            *h = (*h + *b).tanh();
        }
        let mut proj = p.w2.matvec(&hidden);
        for (v, b) in proj.iter_mut().zip(&p.b2) {
            *v = *v + *b;
        }
        let r = &self.readout[self.readout_index(idx)];
        let u = dot(&r.w, &proj) + r.b;
        Ok(GateActivation { hidden, proj, u })
    }

    pub fn num_params(&self) -> usize {
        let per_proj = 2 * self.d_gate + self.d_gate * (self.d_in + self.d_gate);
        self.proj.len() * per_proj + self.readout.len() * (self.d_gate + 1)
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.proj {
            out.extend_from_slice(p.w1.as_slice());
            out.extend_from_slice(&p.b1);
            out.extend_from_slice(p.w2.as_slice());
            out.extend_from_slice(&p.b2);
        }
        for r in &self.readout {
            out.extend_from_slice(&r.w);
            out.push(r.b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [T]| dst.iter_mut().for_each(|d| *d = it.next().expect("length checked"));
        for p in &mut self.proj {
            fill(p.w1.as_mut_slice());
            fill(&mut p.b1);
            fill(p.w2.as_mut_slice());
            fill(&mut p.b2);
        }
        for r in &mut self.readout {
            fill(&mut r.w);
            fill(std::slice::from_mut(&mut r.b));
        }
        Ok(())
    }

    /// Same shape, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        let n = z.num_params();
        z.set_flat(&vec![T::zero(); n]).expect("same shape");
        z
    }

    /// Copy with one readout per head, each equal to the shared one.
    pub fn untied(&self) -> Self {
        let mut u = self.clone();
        if self.is_tied() {
            u.readout = vec![self.readout[0].clone(); self.layers * self.heads];
        }
        u
    }

    /// Collapses per-head readout gradients into the shared readout gradient.
    pub fn tie_gradient(&self) -> Self {
        let mut t = self.clone();
        if !self.is_tied() {
            let mut acc = Readout {
                w: vec![T::zero(); self.d_gate],
                b: T::zero(),
            };
            for r in &self.readout {
                for (a, w) in acc.w.iter_mut().zip(&r.w) {
                    *a = *a + *w;
                }
                acc.b = acc.b + r.b;
            }
            t.readout = vec![acc];
        }
        t
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        let a = self.to_flat();
        let b = other.to_flat();
        if a.len() != b.len() {
            return Err(Error::Shape("gradient shape mismatch".into()));
        }
        let sum: Vec<T> = a.iter().zip(&b).map(|(x, y)| *x + *y).collect();
        self.set_flat(&sum)
    }

    pub fn scale(&mut self, s: T) {
        let v: Vec<T> = self.to_flat().into_iter().map(|x| x * s).collect();
        self.set_flat(&v).expect("same shape");
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> GateParams<U> {
        let conv = |m: &Matrix<T>| Matrix::from_fn(m.rows(), m.cols(), |i, j| U::lit(m.get(i, j).as_f64()));
        let convv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        GateParams {
            layers: self.layers,
            heads: self.heads,
            d_in: self.d_in,
            d_gate: self.d_gate,
            input: self.input,
            proj: self
                .proj
                .iter()
                .map(|p| GateProj {
                    w1: conv(&p.w1),
                    b1: convv(&p.b1),
                    w2: conv(&p.w2),
                    b2: convv(&p.b2),
                })
                .collect(),
            readout: self
                .readout
                .iter()
                .map(|r| Readout {
                    w: convv(&r.w),
                    b: U::lit(r.b.as_f64()),
                })
                .collect(),
        }
    }
}

/// Retention score of a token with hidden input `x` in `(layer, head)`.
pub fn gate_forward<T: Scalar>(x: &[T], layer: usize, head: usize, params: &GateParams<T>) -> Result<T> {
    Ok(sigmoid(params.activation(x, layer, head)?.u))
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logit {z}")));
    }
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// `KL(teacher || student) - log student[target]` for one position.
pub(crate) fn quality_term<T: Scalar>(teacher: &[T], student: &[T], target: usize) -> Result<T> {
    if teacher.len() != student.len() {
        return Err(Error::Shape("teacher and student vocabularies differ".into()));
    }
    if target >= student.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: student.len(),
        });
    }
    let lp = log_softmax(teacher)?;
    let lq = log_softmax(student)?;
    let mut kl = T::zero();
    for (a, b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p > T::zero() {
            kl = kl + p * (*a - *b);
        }
    }
    Ok(kl.max(T::zero()) - lq[target])
}

/// Mean over positions of `KL(teacher || student) + NLL(target)`.
pub fn quality_loss<T: Scalar>(teacher_logits: &Matrix<T>, student_logits: &Matrix<T>, targets: &[usize]) -> Result<T> {
    if teacher_logits.rows() != student_logits.rows() || teacher_logits.cols() != student_logits.cols() {
        return Err(Error::Shape("teacher and student logits differ in shape".into()));
    }
    if targets.len() != student_logits.rows() {
        return Err(Error::Shape(format!("{} targets for {} positions", targets.len(), student_logits.rows())));
    }
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (r, &y) in targets.iter().enumerate() {
        total = total + quality_term(teacher_logits.row(r), student_logits.row(r), y)?;
    }
    Ok(total / T::from_usize_lossy(targets.len()))
}

/// Retained mass `sum_{i <= t} beta_i^(t - i)` of one head at every step.
pub fn retained_mass<T: Scalar>(betas: &[T]) -> Vec<T> {
    (0..betas.len())
        .map(|t| (0..=t).map(|i| retention_factor(betas[i], t - i)).sum())
        .collect()
}

fn check_betas<T: Scalar>(betas: &Matrix<T>) {
    debug_assert!(betas.as_slice().iter().all(|b| *b >= T::zero() && *b <= T::one()), "betas must lie in [0, 1]");
}

/// `sum_t max(0, sum_{heads} sum_{i <= t} beta^(t - i) - m_global)`, with one
/// row of `betas` per (layer, head) and one column per position.
pub fn cap_loss_global<T: Scalar>(betas: &Matrix<T>, m_global: T) -> T {
    check_betas(betas);
    let mut steps = vec![T::zero(); betas.cols()];
    for r in 0..betas.rows() {
        for (s, m) in steps.iter_mut().zip(retained_mass(betas.row(r))) {
            *s = *s + m;
        }
    }
    steps.into_iter().map(|s| (s - m_global).max(T::zero())).sum()
}

/// Per-head variant: each (layer, head) is held to its own budget `m`.
pub fn cap_loss_per_head<T: Scalar>(betas: &Matrix<T>, m: T) -> T {
    check_betas(betas);
    (0..betas.rows())
        .map(|r| retained_mass(betas.row(r)).into_iter().map(|s| (s - m).max(T::zero())).sum::<T>())
        .sum()
}

pub fn total_loss<T: Scalar>(quality: T, cap: T, lambda: T) -> T {
    quality + lambda * cap
}

/// Capacity constraint used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapBudget {
    /// One budget over all layers and heads.
    Global(f64),
    /// The same budget for every (layer, head).
    PerHead(f64),
}

impl CapBudget {
    pub fn loss<T: Scalar>(&self, betas: &Matrix<T>) -> T {
        match *self {
            CapBudget::Global(m) => cap_loss_global(betas, T::lit(m)),
            CapBudget::PerHead(m) => cap_loss_per_head(betas, T::lit(m)),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub d_gate: usize,
    pub input: GateInput,
    pub tied: bool,
    pub activation: String,
    pub seed: u64,
    pub scalar: String,
    pub param_count: usize,
}

fn scalar_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut out: W, params: &GateParams<T>, seed: u64) -> Result<()> {
    params.validate()?;
    let header = CheckpointHeader {
        layers: params.layers,
        heads: params.heads,
        d_in: params.d_in,
        d_gate: params.d_gate,
        input: params.input,
        tied: params.is_tied(),
        activation: ACTIVATION.to_string(),
        seed,
        scalar: scalar_name::<T>().to_string(),
        param_count: params.num_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for v in params.to_flat() {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<(GateParams<T>, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a gate checkpoint".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.activation != ACTIVATION {
        return Err(Error::Checkpoint(format!("unknown activation {}", header.activation)));
    }
    if header.scalar != scalar_name::<T>() {
        return Err(Error::Checkpoint(format!("checkpoint holds {} parameters", header.scalar)));
    }
    let mut params = GateParams::<T> {
        layers: header.layers,
        heads: header.heads,
        d_in: header.d_in,
        d_gate: header.d_gate,
        input: header.input,
        proj: (0..header.layers * header.heads)
            .map(|_| GateProj {
                w1: Matrix::zeros(header.d_gate, header.d_in),
                b1: vec![T::zero(); header.d_gate],
                w2: Matrix::zeros(header.d_gate, header.d_gate),
                b2: vec![T::zero(); header.d_gate],
            })
            .collect(),
        readout: (0..if header.tied { 1 } else { header.layers * header.heads })
            .map(|_| Readout {
                w: vec![T::zero(); header.d_gate],
                b: T::zero(),
            })
            .collect(),
    };
    if params.num_params() != header.param_count {
        return Err(Error::Checkpoint("parameter count does not match the header shape".into()));
    }
    let mut flat = Vec::with_capacity(header.param_count);
    let mut buf = [0u8; 8];
    for _ in 0..header.param_count {
        input.read_exact(&mut buf)?;
        flat.push(T::lit(f64::from_le_bytes(buf)));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    params.set_flat(&flat)?;
    params.validate()?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(tied: bool, seed: u64) -> GateParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GateParams::init(2, 2, 6, 4, GateInput::Embedding, tied, GateInit::default(), &mut rng).unwrap()
    }

    #[test]
    fn zero_readout_gives_init_bias() {
        let mut p = params(true, 1);
        p.readout[0].w.iter_mut().for_each(|w| *w = 0.0);
        for x in [[0.0; 6], [5.0, -3.0, 1.0, 2.0, 7.0, -9.0]] {
            let b = gate_forward(&x, 1, 0, &p).unwrap();
            assert_eq!(b, 0.999_999_984_770_020_5);
        }
    }

    #[test]
    fn very_negative_bias_goes_to_zero() {
        let mut p = params(true, 1);
        p.readout[0].b = -800.0;
        let b = gate_forward(&[0.1; 6], 0, 1, &p).unwrap();
        assert!((0.0..1e-300).contains(&b));
    }

    #[test]
    fn matches_direct_evaluation() {
        let p = params(false, 3);
        let x = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9];
        for (l, h) in [(0, 0), (1, 1)] {
            let idx = l * 2 + h;
            let g = &p.proj[idx];
            let mut hid = [0.0; 4];
            for (r, hv) in hid.iter_mut().enumerate() {
                let mut s = g.b1[r];
                for c in 0..6 {
                    s += g.w1.get(r, c) * x[c];
                }
                *hv = s.tanh();
            }
            let mut u = p.readout[idx].b;
            for r in 0..4 {
                let mut s = g.b2[r];
                for c in 0..4 {
                    s += g.w2.get(r, c) * hid[c];
                }
                u += p.readout[idx].w[r] * s;
            }
            let direct = 1.0 / (1.0 + (-u).exp());
            assert!((gate_forward(&x, l, h, &p).unwrap() - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_differ_only_through_projection() {
        let mut p = params(true, 4);
        p.proj[3] = p.proj[0].clone();
        let x = [0.2; 6];
        assert_eq!(gate_forward(&x, 0, 0, &p).unwrap(), gate_forward(&x, 1, 1, &p).unwrap());
        assert!(gate_forward(&[0.2; 5], 0, 0, &p).is_err());
        assert!(gate_forward(&x, 2, 0, &p).is_err());
    }

    #[test]
    fn quality_loss_examples() {
        let t = Matrix::from_vec(2, 3, vec![0.1, 2.0, -1.0, 0.5, 0.5, 0.0]).unwrap();
        let s = Matrix::from_vec(2, 3, vec![-0.4, 1.0, 0.3, 0.9, -0.2, 0.1]).unwrap();
        let y = [1, 0];
        let oracle = |a: &[f64], b: &[f64], yy: usize| {
            let zp: f64 = a.iter().map(|v| v.exp()).sum();
            let zq: f64 = b.iter().map(|v| v.exp()).sum();
            let mut acc = 0.0;
            for k in 0..3 {
                let p = a[k].exp() / zp;
                let q = b[k].exp() / zq;
                acc += p * (p / q).ln();
            }
            acc - (b[yy].exp() / zq).ln()
        };
        let want = (oracle(t.row(0), s.row(0), 1) + oracle(t.row(1), s.row(1), 0)) / 2.0;
        assert!((quality_loss(&t, &s, &y).unwrap() - want).abs() < 1e-14);

        // Identical distributions: only the NLL term remains.
        let nll = -(s.row(0)[1] - logsumexp(s.row(0)));
        let one = Matrix::from_vec(1, 3, s.row(0).to_vec()).unwrap();
        assert!((quality_loss(&one, &one, &[1]).unwrap() - nll).abs() < 1e-15);

        let sharp = Matrix::from_vec(1, 3, vec![-50.0, 50.0, -50.0]).unwrap();
        assert!(quality_loss(&sharp, &sharp, &[1]).unwrap() < 1e-40);

        let bad = Matrix::from_vec(1, 3, vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(quality_loss(&bad, &one, &[0]).is_err());
    }

    #[test]
    fn cap_loss_examples() {
        let zeros = Matrix::<f64>::zeros(4, 7);
        assert_eq!(cap_loss_global(&zeros, 4.0), 0.0);
        assert_eq!(cap_loss_global(&zeros, 3.0), 7.0);
        let ones = Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap();
        assert_eq!(cap_loss_global(&ones, 2.0), 1.0);
        assert_eq!(cap_loss_per_head(&ones, 2.0), 1.0);
        assert_eq!(cap_loss_global(&ones, f64::INFINITY), 0.0);
        assert_eq!(cap_loss_per_head(&zeros, 1.0), 0.0);

        let two = Matrix::from_vec(2, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cap_loss_per_head(&two, 2.0), 1.0);
        let under = Matrix::from_vec(2, 3, vec![0.5; 6]).unwrap();
        assert_eq!(cap_loss_per_head(&under, 2.0), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 3.0, 0.5), 3.5);
        assert_eq!(total_loss(2.0, 0.0, 1.0), 2.0);
    }

    #[test]
    fn flat_roundtrip_and_tying() {
        let p = params(true, 5);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.readout.len(), 1);
        let u = p.untied();
        assert_eq!(u.readout.len(), 4);
        assert_eq!(u.tie_gradient().readout[0].b, 4.0 * p.readout[0].b);
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        for tied in [true, false] {
            let p = params(tied, 6);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &p, 99).unwrap();
            let (q, h) = read_checkpoint::<f64, _>(buf.as_slice()).unwrap();
            assert_eq!(h.seed, 99);
            assert_eq!(h.tied, tied);
            let a: Vec<u64> = p.to_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.to_flat().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
            buf[0] = b'X';
            assert!(read_checkpoint::<f64, _>(buf.as_slice()).is_err());
        }
        let p32: GateParams<f32> = params(true, 7).cast();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p32, 1).unwrap();
        let (q, _) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(p32, q);
    }
}
