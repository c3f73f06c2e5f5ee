//! Distributions over subsets of layers.
//!
//! Layers are indexed from 0. A scheme draws an [`ActiveSet`] each iteration;
//! layers outside it are frozen. [`SamplingScheme::marginals`] gives the two
//! quantities the expected cost is linear in: `F_i`, the probability that the
//! smallest active index is at most `i`, and `Q_i`, the probability that layer
//! `i` is active.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("layer count must be positive")]
    NoLayers,
    #[error("probability vector has length {got}, expected {expected}")]
    ProbLength { expected: usize, got: usize },
    #[error("probability entry {index} is {value}, must be finite and non-negative")]
    NegativeProb { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    ProbSum(f64),
    #[error("tau = {tau} must satisfy 1 <= tau <= b = {b}")]
    InvalidTau { b: usize, tau: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("active set must be non-empty")]
    EmptyActiveSet,
    #[error("active set indices must be strictly increasing: {0:?}")]
    UnsortedActiveSet(Vec<usize>),
    #[error("epoch shift needs b >= 1, finite alpha and progress in [0, 1]")]
    InvalidEpochShift,
}

/// Non-empty, strictly increasing list of active layer indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ActiveSet(Vec<usize>);

impl TryFrom<Vec<usize>> for ActiveSet {
    type Error = SamplingError;
    fn try_from(v: Vec<usize>) -> Result<Self, SamplingError> {
        ActiveSet::new(v)
    }
}

impl From<ActiveSet> for Vec<usize> {
    fn from(s: ActiveSet) -> Self {
        s.0
    }
}

impl ActiveSet {
    pub fn new(indices: Vec<usize>) -> Result<Self, SamplingError> {
        if indices.is_empty() {
            return Err(SamplingError::EmptyActiveSet);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SamplingError::UnsortedActiveSet(indices));
        }
        Ok(ActiveSet(indices))
    }

    /// `{start, …, end-1}`; panics when empty.
    pub fn range(start: usize, end: usize) -> Self {
        assert!(start < end, "empty range {start}..{end}");
        ActiveSet((start..end).collect())
    }

    pub fn min_index(&self) -> usize {
        self.0[0]
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingScheme {
    /// Randomized progressive training: cutoff `s ~ p`, active set `{s, …, b-1}`.
    Rpt { p: Vec<f64> },
    /// Uniform subset of size `tau`.
    TauNice { b: usize, tau: usize },
    /// Contiguous window `{s, …, s+tau-1}` with start `s ~ p` over `0..=b-tau`.
    TauSubmodel { b: usize, tau: usize, p: Vec<f64> },
    /// One block of a fixed partition, block `k` with probability `p[k]`.
    Partitioned { blocks: Vec<Vec<usize>>, p: Vec<f64> },
    FullNetwork { b: usize },
}

/// Closed-form marginals: `f[i] = P(min S ≤ i)`, `q[i] = P(i ∈ S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub f: Vec<f64>,
    pub q: Vec<f64>,
}

fn check_probs(p: &[f64], expected: usize) -> Result<(), SamplingError> {
    if p.len() != expected {
        return Err(SamplingError::ProbLength { expected, got: p.len() });
    }
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(SamplingError::NegativeProb { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(SamplingError::ProbSum(sum));
    }
    Ok(())
}

/// `C(n, k)` as a float, zero when `k > n`.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Inverse-CDF draw of an index; zero-probability entries are never returned.
fn draw_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        acc += pj;
        if pj > 0.0 && u < acc {
            return j;
        }
    }
    p.iter().rposition(|&pj| pj > 0.0).expect("probability vector has positive mass")
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(pos) = (0..k).rev().find(|&j| cur[j] < n - k + j) else {
            return out;
        };
        cur[pos] += 1;
        for j in pos + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

impl SamplingScheme {
    pub fn rpt(p: Vec<f64>) -> Result<Self, SamplingError> {
        let s = SamplingScheme::Rpt { p };
        s.validate()?;
        Ok(s)
    }

    pub fn num_layers(&self) -> usize {
        match self {
            SamplingScheme::Rpt { p } => p.len(),
            SamplingScheme::TauNice { b, .. }
            | SamplingScheme::TauSubmodel { b, .. }
            | SamplingScheme::FullNetwork { b } => *b,
            SamplingScheme::Partitioned { blocks, .. } => blocks.iter().map(Vec::len).sum(),
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        match self {
            SamplingScheme::Rpt { p } => {
                if p.is_empty() {
                    return Err(SamplingError::NoLayers);
                }
                check_probs(p, p.len())
            }
            SamplingScheme::TauNice { b, tau } => {
                if *b == 0 {
                    return Err(SamplingError::NoLayers);
                }
                if *tau == 0 || tau > b {
                    return Err(SamplingError::InvalidTau { b: *b, tau: *tau });
                }
                Ok(())
            }
            SamplingScheme::TauSubmodel { b, tau, p } => {
                if *b == 0 {
                    return Err(SamplingError::NoLayers);
                }
                if *tau == 0 || tau > b {
                    return Err(SamplingError::InvalidTau { b: *b, tau: *tau });
                }
                check_probs(p, b - tau + 1)
            }
            SamplingScheme::Partitioned { blocks, p } => {
                if blocks.is_empty() {
                    return Err(SamplingError::NoLayers);
                }
                let b = self.num_layers();
                let mut seen = vec![false; b];
                for (k, block) in blocks.iter().enumerate() {
                    if block.is_empty() {
                        return Err(SamplingError::InvalidPartition(format!("block {k} is empty")));
                    }
                    for &i in block {
                        if i >= b || seen[i] {
                            return Err(SamplingError::InvalidPartition(format!(
                                "layer {i} is out of range or in more than one block"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                check_probs(p, blocks.len())
            }
            SamplingScheme::FullNetwork { b } => {
                if *b == 0 {
                    return Err(SamplingError::NoLayers);
                }
                Ok(())
            }
        }
    }

    /// Non-fatal issues. An RPT vector with `p[0] = 0` never updates layer 0.
    pub fn warnings(&self) -> Vec<String> {
        match self {
            SamplingScheme::Rpt { p } if p.first() == Some(&0.0) => {
                vec!["RPT cutoff probability p[0] is zero: layer 0 is never updated".into()]
            }
            _ => Vec::new(),
        }
    }

    /// Draw one active set. The scheme must be valid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActiveSet {
        match self {
            SamplingScheme::Rpt { p } => ActiveSet::range(draw_index(p, rng), p.len()),
            SamplingScheme::TauNice { b, tau } => {
                let mut idx: Vec<usize> = (0..*b).collect();
                let (chosen, _) = idx.partial_shuffle(rng, *tau);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                ActiveSet(chosen)
            }
            SamplingScheme::TauSubmodel { tau, p, .. } => {
                let s = draw_index(p, rng);
                ActiveSet::range(s, s + tau)
            }
            SamplingScheme::Partitioned { blocks, p } => {
                let mut block = blocks[draw_index(p, rng)].clone();
                block.sort_unstable();
                ActiveSet(block)
            }
            SamplingScheme::FullNetwork { b } => ActiveSet::range(0, *b),
        }
    }

    pub fn marginals(&self) -> Marginals {
        let mut m = self.raw_marginals();
        // every active set is non-empty, so its minimum is at most b-1
        if let Some(last) = m.f.last_mut() {
            *last = 1.0;
        }
        if let SamplingScheme::Rpt { .. } = self {
            m.q.clone_from(&m.f);
        }
        m
    }

    fn raw_marginals(&self) -> Marginals {
        let b = self.num_layers();
        match self {
            SamplingScheme::Rpt { p } => {
                let f: Vec<f64> = p
                    .iter()
                    .scan(0.0, |acc, &x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect();
                Marginals { q: f.clone(), f }
            }
            SamplingScheme::TauNice { b, tau } => {
                let total = binomial(*b, *tau);
                let f = (0..*b).map(|i| 1.0 - binomial(b - 1 - i, *tau) / total).collect();
                Marginals { f, q: vec![*tau as f64 / *b as f64; *b] }
            }
            SamplingScheme::TauSubmodel { b, tau, p } => {
                let last = b - tau;
                let f = (0..*b).map(|i| p[..=i.min(last)].iter().sum()).collect();
                let q = (0..*b)
                    .map(|i| {
                        let lo = (i + 1).saturating_sub(*tau);
                        let hi = i.min(last);
                        if lo > hi {
                            0.0
                        } else {
                            p[lo..=hi].iter().sum()
                        }
                    })
                    .collect();
                Marginals { f, q }
            }
            SamplingScheme::Partitioned { blocks, p } => {
                let mut f = vec![0.0; b];
                let mut q = vec![0.0; b];
                for (i, fi) in f.iter_mut().enumerate() {
                    *fi = blocks
                        .iter()
                        .zip(p)
                        .filter(|(blk, _)| blk.iter().min().is_some_and(|&m| m <= i))
                        .map(|(_, pk)| pk)
                        .sum();
                }
                for (blk, pk) in blocks.iter().zip(p) {
                    for &i in blk {
                        q[i] = *pk;
                    }
                }
                Marginals { f, q }
            }
            SamplingScheme::FullNetwork { b } => Marginals { f: vec![1.0; *b], q: vec![1.0; *b] },
        }
    }

    /// Every active set with its probability, zero-probability sets omitted.
    pub fn atoms(&self) -> Vec<(ActiveSet, f64)> {
        let b = self.num_layers();
        match self {
            SamplingScheme::Rpt { p } => p
                .iter()
                .enumerate()
                .filter(|(_, &pj)| pj > 0.0)
                .map(|(j, &pj)| (ActiveSet::range(j, b), pj))
                .collect(),
            SamplingScheme::TauNice { b, tau } => {
                let each = 1.0 / binomial(*b, *tau);
                combinations(*b, *tau).into_iter().map(|c| (ActiveSet(c), each)).collect()
            }
            SamplingScheme::TauSubmodel { tau, p, .. } => p
                .iter()
                .enumerate()
                .filter(|(_, &pj)| pj > 0.0)
                .map(|(j, &pj)| (ActiveSet::range(j, j + tau), pj))
                .collect(),
            SamplingScheme::Partitioned { blocks, p } => blocks
                .iter()
                .zip(p)
                .filter(|(_, &pk)| pk > 0.0)
                .map(|(blk, &pk)| {
                    let mut blk = blk.clone();
                    blk.sort_unstable();
                    (ActiveSet(blk), pk)
                })
                .collect(),
            SamplingScheme::FullNetwork { b } => vec![(ActiveSet::range(0, *b), 1.0)],
        }
    }

    pub fn support(&self) -> Vec<ActiveSet> {
        self.atoms().into_iter().map(|(s, _)| s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochShiftConfig {
    pub b: usize,
    pub alpha: f64,
    pub progress: f64,
}

/// Exponential-weight cutoff distribution that starts biased towards shallow
/// cutoffs and moves mass to deep ones as `progress` goes from 0 to 1.
pub fn epoch_shift_probs(cfg: &EpochShiftConfig) -> Result<Vec<f64>, SamplingError> {
    if cfg.b == 0 || !cfg.alpha.is_finite() || !(0.0..=1.0).contains(&cfg.progress) {
        return Err(SamplingError::InvalidEpochShift);
    }
    let top = (cfg.b - 1) as f64;
    let exponents: Vec<f64> = (0..cfg.b)
        .map(|i| {
            let i = i as f64;
            cfg.alpha * ((1.0 - cfg.progress) * (top - i) + cfg.progress * i)
        })
        .collect();
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Named purposes for independent random streams within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamPurpose {
    Sampling = 1,
    GradientNoise = 2,
    Initialization = 3,
    Data = 4,
}

/// Seeded stream factory.
///
/// The generator is ChaCha8 keyed by `seed_from_u64(seed)`. Each
/// `(purpose, index)` pair gets its own ChaCha stream id
/// `(purpose << 48) | index`, where `index` is normally the iteration number,
/// so a run replays bit-identically and changing one consumer (for example
/// turning off gradient noise) does not shift any other consumer's draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    pub seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn rng(&self, purpose: StreamPurpose, index: u64) -> ChaCha8Rng {
        assert!(index < 1 << 48, "stream index {index} too large");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) | index);
        rng
    }
}
