//! Synthetic multi-key needle retrieval and a hand-wired backbone that solves
//! it by induction, with a controllable amount of attention dilution.
//!
//! A sequence is filler text with `pairs` key/value needles inserted at
//! random, followed by `queries` blocks `Q k v`. The model is scored at each
//! queried key on predicting the value that followed it in the context.
//!
//! The backbone has two layers of two heads. Layer 0 head 0 lets a value
//! token look up the key just before it; layer 1 head 0 matches the queried
//! key against those lookups and copies the value out. Fillers carry a
//! per-token salience that leaks into the retrieval logits, so a full cache
//! spends attention mass on them. The remaining heads write into dimensions
//! the readout ignores.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, HeadWeights, ModelShape, Sample};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const N_KEYS: usize = 8;
pub const N_VALUES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub context_len: usize,
    pub pairs: usize,
    pub queries: usize,
    pub fillers: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            context_len: 128,
            pairs: 6,
            queries: 2,
            fillers: 24,
        }
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> usize {
        N_KEYS + N_VALUES + self.fillers + 1
    }

    pub fn key(&self, j: usize) -> usize {
        j
    }

    pub fn value(&self, j: usize) -> usize {
        N_KEYS + j
    }

    pub fn filler(&self, j: usize) -> usize {
        N_KEYS + N_VALUES + j
    }

    pub fn marker(&self) -> usize {
        N_KEYS + N_VALUES + self.fillers
    }

    /// Tokens before the query blocks.
    pub fn body_len(&self) -> usize {
        self.context_len - 3 * self.queries
    }

    pub fn distractors(&self) -> usize {
        self.body_len() - 2 * self.pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.pairs > N_KEYS || self.queries == 0 || self.queries > self.pairs || self.fillers == 0 {
            return Err(Error::Config(format!("invalid task {self:?}")));
        }
        // Each needle needs its pair plus a separating filler.
        if self.context_len < 3 * self.queries + 3 * self.pairs + 1 {
            return Err(Error::Config(format!("context of {} too short for the needles", self.context_len)));
        }
        Ok(())
    }

    /// Draws one sequence. Needle slots are uniform among layouts in which
    /// every pair is preceded and followed by filler.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Sample> {
        self.validate()?;
        let body = self.body_len();
        // Choose `pairs` start offsets in a body of `body - 2 pairs` filler
        // gaps: pick sorted gap sizes by sampling distinct positions in a
        // compressed index space, then expand.
        let free = body - 3 * self.pairs;
        let mut cuts: Vec<usize> = (0..=free).collect::<Vec<_>>().choose_multiple(rng, self.pairs).copied().collect();
        cuts.sort_unstable();
        let starts: Vec<usize> = cuts.iter().enumerate().map(|(j, c)| c + 3 * j + 1).collect();

        let mut keys: Vec<usize> = (0..N_KEYS).collect();
        keys.shuffle(rng);
        keys.truncate(self.pairs);
        let values: Vec<usize> = (0..self.pairs).map(|_| rng.random_range(0..N_VALUES)).collect();

        let mut tokens: Vec<usize> = (0..body).map(|_| self.filler(rng.random_range(0..self.fillers))).collect();
        for (j, &s) in starts.iter().enumerate() {
            tokens[s] = self.key(keys[j]);
            tokens[s + 1] = self.value(values[j]);
        }
        let mut asked: Vec<usize> = (0..self.pairs).collect();
        asked.shuffle(rng);
        asked.truncate(self.queries);
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for &j in &asked {
            tokens.push(self.marker());
            positions.push(tokens.len());
            targets.push(self.value(values[j]));
            tokens.push(self.key(keys[j]));
            tokens.push(self.value(values[j]));
        }
        Ok(Sample {
            tokens,
            positions,
            targets,
        })
    }

    pub fn dataset(&self, count: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// Knobs of the hand-wired solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wiring {
    /// Key-lookup logit gain in layer 0.
    pub lookup_gain: f64,
    /// Recency slope of the key-lookup head.
    pub lookup_slope: f64,
    /// Retrieval logit gain in layer 1.
    pub retrieve_gain: f64,
    /// Salience range of filler tokens, in units of a perfect key match.
    pub salience: (f64, f64),
    /// Weight of a filler's decoy value in its embedding.
    pub decoy_mix: f64,
    pub readout_gain: f64,
    pub d_gate: usize,
    pub seed: u64,
}

impl Default for Wiring {
    fn default() -> Self {
        Self {
            lookup_gain: 12.0,
            lookup_slope: 2.0,
            retrieve_gain: 14.0,
            salience: (0.3, 0.9),
            decoy_mix: 0.8,
            readout_gain: 6.0,
            d_gate: 16,
            seed: 0,
        }
    }
}

// Residual stream layout.
const D_MODEL: usize = 64;
const D_HEAD: usize = 16;
const TOK: usize = 0; // keys at [0, 8), value space at [8, 16)
const TYPE: usize = 16; // key, value, filler, marker
const SAL: usize = 20;
const PREV: usize = 24;
const OUT: usize = 32;
const JUNK: usize = 40;

const KEY_T: usize = 0;
const VALUE_T: usize = 1;
const FILLER_T: usize = 2;
const MARKER_T: usize = 3;

impl Wiring {
    pub fn shape(&self, task: &TaskSpec) -> ModelShape {
        ModelShape {
            layers: 2,
            heads: 2,
            d_model: D_MODEL,
            d_head: D_HEAD,
            d_gate: self.d_gate,
            vocab: task.vocab(),
            seq_len: task.context_len,
        }
    }

    pub fn build<T: Scalar>(&self, task: &TaskSpec) -> Result<Backbone<T>> {
        task.validate()?;
        let (lo, hi) = self.salience;
        if !(0.0 <= lo && lo <= hi) || !(0.0..=1.0).contains(&self.decoy_mix) {
            return Err(Error::Config(format!("invalid wiring {self:?}")));
        }
        let shape = self.shape(task);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let lit = T::lit;
        let scale = (D_HEAD as f64).sqrt();

        let mut embed = Matrix::<T>::zeros(shape.vocab, D_MODEL);
        for j in 0..N_KEYS {
            embed.set(task.key(j), TOK + j, T::one());
            embed.set(task.key(j), TYPE + KEY_T, T::one());
        }
        for j in 0..N_VALUES {
            embed.set(task.value(j), TOK + N_KEYS + j, T::one());
            embed.set(task.value(j), TYPE + VALUE_T, T::one());
        }
        for f in 0..task.fillers {
            let row = task.filler(f);
            let decoy = rng.random_range(0..N_VALUES);
            let mut e: Vec<f64> = (0..N_VALUES).map(|_| rng.random::<f64>()).collect();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter_mut().for_each(|v| *v *= (1.0 - self.decoy_mix) / norm);
            e[decoy] += self.decoy_mix;
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in e.iter().enumerate() {
                embed.set(row, TOK + N_KEYS + j, lit(v / norm));
            }
            embed.set(row, TYPE + FILLER_T, T::one());
            embed.set(row, SAL, lit(rng.random_range(lo..=hi)));
        }
        embed.set(task.marker(), TYPE + MARKER_T, T::one());

        let zeros = || Matrix::<T>::zeros(D_HEAD, D_MODEL);

        // Layer 0, head 0: a value looks up the key right before it; every
        // other token type avoids keys, so only values receive a key identity.
        let mut affinity = [[0.0; 4]; 4];
        affinity[VALUE_T][KEY_T] = self.lookup_gain;
        for t in [KEY_T, FILLER_T, MARKER_T] {
            affinity[t][KEY_T] = -self.lookup_gain;
        }
        let mut wq = zeros();
        let mut wk = zeros();
        for c in 0..4 {
            wk.set(c, TYPE + c, T::one());
            for (a, row) in affinity.iter().enumerate() {
                wq.set(c, TYPE + a, lit(row[c] * scale));
            }
        }
        let mut wv = zeros();
        let mut wo = Matrix::zeros(D_MODEL, D_HEAD);
        for j in 0..N_KEYS {
            wv.set(j, TOK + j, T::one());
            wo.set(PREV + j, j, T::one());
        }
        let lookup = HeadWeights {
            wq,
            wk,
            wv,
            wo,
            slope: lit(self.lookup_slope),
        };

        // Layer 1, head 0: match the current key against looked-up keys; the
        // constant channel (sum of type bits) pairs with filler salience.
        let g = self.retrieve_gain * scale;
        let mut wq = zeros();
        let mut wk = zeros();
        for j in 0..N_KEYS {
            wq.set(j, TOK + j, lit(g));
            wk.set(j, PREV + j, T::one());
        }
        for c in 0..4 {
            wq.set(N_KEYS, TYPE + c, lit(g));
        }
        wk.set(N_KEYS, SAL, T::one());
        let mut wv = zeros();
        let mut wo = Matrix::zeros(D_MODEL, D_HEAD);
        for j in 0..N_VALUES {
            wv.set(j, TOK + N_KEYS + j, T::one());
            wo.set(OUT + j, j, T::one());
        }
        let retrieve = HeadWeights {
            wq,
            wk,
            wv,
            wo,
            slope: T::zero(),
        };

        // Heads that attend broadly and write where the readout never looks.
        let mut junk = |offset: usize| {
            let wq = Matrix::from_fn(D_HEAD, D_MODEL, |_, c| if c < TYPE { lit(rng.random_range(-1.0..1.0)) } else { T::zero() });
            let wk = Matrix::from_fn(D_HEAD, D_MODEL, |_, c| if c < TYPE { lit(rng.random_range(-1.0..1.0)) } else { T::zero() });
            let wv = Matrix::from_fn(D_HEAD, D_MODEL, |_, c| if c < TYPE { lit(rng.random_range(-1.0..1.0)) } else { T::zero() });
            let wo = Matrix::from_fn(D_MODEL, D_HEAD, |r, c| if r == JUNK + offset + c % 12 { lit(0.5) } else { T::zero() });
            HeadWeights {
                wq,
                wk,
                wv,
                wo,
                slope: lit(0.5),
            }
        };
        let junk0 = junk(0);
        let junk1 = junk(12);

        let mut unembed = Matrix::zeros(shape.vocab, D_MODEL);
        for r in 0..shape.vocab {
            if (N_KEYS..N_KEYS + N_VALUES).contains(&r) {
                unembed.set(r, OUT + r - N_KEYS, lit(self.readout_gain));
            } else {
                for c in 0..4 {
                    unembed.set(r, TYPE + c, lit(-self.readout_gain));
                }
            }
        }
        let bb = Backbone {
            shape,
            embed,
            heads: vec![lookup, junk0, retrieve, junk1],
            unembed,
        };
        bb.validate()?;
        Ok(bb)
    }
}
