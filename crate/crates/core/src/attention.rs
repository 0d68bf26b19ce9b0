//! Single-head attention over a KV cache: full, hard-evicted and
//! retention-gated variants, plus the dilution metric.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{dot, retention_log_weight, softmax_log_space, Matrix};
use crate::scalar::Scalar;

/// Keys, values, birth steps and retention scores of one head's cache.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache<T> {
    keys: Matrix<T>,
    values: Matrix<T>,
    births: Vec<usize>,
    betas: Vec<T>,
}

impl<T: Scalar> HeadCache<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, dim),
            values: Matrix::zeros(0, dim),
            births: Vec::new(),
            betas: Vec::new(),
        }
    }

    /// Assembles a cache, checking the length, ordering and range invariants.
    pub fn from_parts(keys: Matrix<T>, values: Matrix<T>, births: Vec<usize>, betas: Vec<T>) -> Result<Self> {
        let n = keys.rows();
        if values.rows() != n || births.len() != n || betas.len() != n {
            return Err(Error::Shape(format!(
                "cache parts disagree: {n} keys, {} values, {} births, {} betas",
                values.rows(),
                births.len(),
                betas.len()
            )));
        }
        if keys.cols() != values.cols() {
            return Err(Error::Shape("key and value dimensions differ".into()));
        }
        if births.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("birth steps must be strictly increasing".into()));
        }
        check_betas(&betas)?;
        Ok(Self {
            keys,
            values,
            births,
            betas,
        })
    }

    pub fn push(&mut self, key: &[T], value: &[T], birth: usize, beta: T) -> Result<()> {
        if let Some(&last) = self.births.last() {
            if birth <= last {
                return Err(Error::InvalidArgument(format!("birth {birth} not after {last}")));
            }
        }
        check_betas(&[beta])?;
        if value.len() != self.values.cols() {
            return Err(Error::Shape("value dimension".into()));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.births.push(birth);
        self.betas.push(beta);
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.births.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.births.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.keys
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn births(&self) -> &[usize] {
        &self.births
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    /// Copy holding only the listed positions, in their original order.
    pub fn restrict(&self, positions: &BTreeSet<usize>) -> Result<Self> {
        let mut out = Self::new(self.dim());
        for &p in positions {
            if p >= self.len() {
                return Err(Error::IndexOutOfRange { index: p, len: self.len() });
            }
            out.push(self.keys.row(p), self.values.row(p), self.births[p], self.betas[p])?;
        }
        Ok(out)
    }
}

fn check_betas<T: Scalar>(betas: &[T]) -> Result<()> {
    match betas.iter().find(|b| !(**b >= T::zero() && **b <= T::one())) {
        Some(b) => Err(Error::InvalidArgument(format!("retention score {b} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Cache positions that are useful for the current prediction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsefulSet(pub BTreeSet<usize>);

impl UsefulSet {
    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<usize> for UsefulSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Attention output together with the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Attended<T> {
    pub output: Vec<T>,
    pub weights: Vec<T>,
}

/// Scaled dot-product logits `q . k_i / sqrt(d)`.
pub fn logits<T: Scalar>(q: &[T], cache: &HeadCache<T>) -> Result<Vec<T>> {
    if q.len() != cache.dim() {
        return Err(Error::Shape(format!("query dim {} vs cache dim {}", q.len(), cache.dim())));
    }
    let scale = T::one() / T::from_usize_lossy(cache.dim()).sqrt();
    Ok((0..cache.len()).map(|i| dot(q, cache.keys.row(i)) * scale).collect())
}

/// Attention with arbitrary multiplicative weights given in log space.
pub fn attend_weighted<T: Scalar>(q: &[T], cache: &HeadCache<T>, log_weights: &[T]) -> Result<Attended<T>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let z = logits(q, cache)?;
    let weights = softmax_log_space(&z, log_weights)?;
    let output = cache.values.matvec_t(&weights);
    Ok(Attended { output, weights })
}

pub fn attend_full<T: Scalar>(q: &[T], cache: &HeadCache<T>) -> Result<Attended<T>> {
    let zeros = vec![T::zero(); cache.len()];
    attend_weighted(q, cache, &zeros)
}

/// Retention-gated attention at decoding step `step`: entry `i` is weighted by
/// `beta_i^(step - birth_i)`.
pub fn attend_retained<T: Scalar>(q: &[T], cache: &HeadCache<T>, step: usize) -> Result<Attended<T>> {
    let lw = retention_log_weights(cache, step)?;
    attend_weighted(q, cache, &lw)
}

pub fn retention_log_weights<T: Scalar>(cache: &HeadCache<T>, step: usize) -> Result<Vec<T>> {
    cache
        .births
        .iter()
        .zip(&cache.betas)
        .map(|(&b, &beta)| {
            if b > step {
                Err(Error::InvalidArgument(format!("step {step} precedes birth {b}")))
            } else {
                Ok(retention_log_weight(beta, step - b))
            }
        })
        .collect()
}

/// Attention restricted to the `retained` cache positions.
pub fn attend_evicted<T: Scalar>(q: &[T], cache: &HeadCache<T>, retained: &BTreeSet<usize>) -> Result<Attended<T>> {
    if retained.is_empty() {
        return Err(Error::InvalidArgument("retained set is empty".into()));
    }
    if let Some(&last) = retained.iter().next_back() {
        if last >= cache.len() {
            return Err(Error::IndexOutOfRange { index: last, len: cache.len() });
        }
    }
    let lw: Vec<T> = (0..cache.len())
        .map(|i| if retained.contains(&i) { T::zero() } else { T::neg_infinity() })
        .collect();
    attend_weighted(q, cache, &lw)
}

/// Fraction of attention mass outside the useful set.
pub fn dilution<T: Scalar>(weights: &[T], useful: &UsefulSet) -> Result<T> {
    let mut mass = T::zero();
    for &i in &useful.0 {
        let w = weights.get(i).ok_or(Error::IndexOutOfRange { index: i, len: weights.len() })?;
        mass = mass + *w;
    }
    Ok((T::one() - mass).max(T::zero()).min(T::one()))
}
