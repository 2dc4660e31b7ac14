use crate::error::{Error, Result};
use crate::numerics::sample_row;
use crate::rng::RngState;
use crate::tensor::TokenBatch;

/// Largest sequence length and vocabulary an exact table may have.
pub const MAX_EXACT_POSITIONS: usize = 4;
pub const MAX_EXACT_VOCAB: usize = 4;

/// Floor applied to the model probability inside [`kl`].
pub const KL_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// Probability of every sequence in `{0..K}^D`, indexed base `K` with
/// position 0 most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    vocab: usize,
    positions: usize,
    probs: Vec<f64>,
}

pub(crate) fn check_enumerable(vocab: usize, positions: usize) -> Result<()> {
    if vocab == 0 || positions == 0 || vocab > MAX_EXACT_VOCAB || positions > MAX_EXACT_POSITIONS {
        return Err(Error::StateSpace {
            states: vocab.saturating_pow(positions as u32),
            limit: MAX_EXACT_VOCAB.pow(MAX_EXACT_POSITIONS as u32),
        });
    }
    Ok(())
}

impl ExactDistribution {
    pub fn new(vocab: usize, positions: usize, probs: Vec<f64>) -> Result<Self> {
        check_enumerable(vocab, positions)?;
        if probs.len() != vocab.pow(positions as u32) {
            return Err(Error::Shape(format!(
                "{} probabilities for {vocab}^{positions} sequences",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            vocab,
            positions,
            probs,
        })
    }

    /// Table built from unnormalized weights.
    pub fn from_weights(vocab: usize, positions: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("weights have no mass".into()));
        }
        Self::new(vocab, positions, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab: usize, positions: usize) -> Result<Self> {
        check_enumerable(vocab, positions)?;
        let n = vocab.pow(positions as u32);
        Self::new(vocab, positions, vec![1.0 / n as f64; n])
    }

    /// Plug-in histogram of `samples`.
    pub fn empirical(vocab: usize, samples: &TokenBatch) -> Result<Self> {
        check_enumerable(vocab, samples.positions())?;
        samples.validate(vocab)?;
        let mut counts = vec![0.0; vocab.pow(samples.positions() as u32)];
        for seq in samples.sequences() {
            counts[index_of(vocab, seq)] += 1.0;
        }
        Self::from_weights(vocab, samples.positions(), counts)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index(&self, seq: &[u32]) -> usize {
        index_of(self.vocab, seq)
    }

    pub fn sequence(&self, index: usize) -> Vec<u32> {
        sequence_of(self.vocab, self.positions, index)
    }

    pub fn prob(&self, seq: &[u32]) -> f64 {
        self.probs[self.index(seq)]
    }

    /// Marginal of position `d`.
    pub fn marginal(&self, d: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.vocab];
        for (i, &p) in self.probs.iter().enumerate() {
            m[self.sequence(i)[d] as usize] += p;
        }
        m
    }

    pub fn sample(&self, n: usize, rng: &mut RngState) -> TokenBatch {
        let mut tokens = Vec::with_capacity(n * self.positions);
        for _ in 0..n {
            tokens.extend(self.sequence(sample_row(&self.probs, rng)));
        }
        TokenBatch::new(n, self.positions, tokens).expect("sized")
    }

    pub fn total_variation(&self, other: &ExactDistribution) -> Result<f64> {
        self.check_same_space(other)?;
        Ok(crate::numerics::total_variation(&self.probs, &other.probs))
    }

    fn check_same_space(&self, other: &ExactDistribution) -> Result<()> {
        if self.vocab != other.vocab || self.positions != other.positions {
            return Err(Error::Shape(format!(
                "distributions over {}^{} and {}^{}",
                self.vocab, self.positions, other.vocab, other.positions
            )));
        }
        Ok(())
    }
}

pub(crate) fn index_of(vocab: usize, seq: &[u32]) -> usize {
    seq.iter().fold(0, |acc, &x| acc * vocab + x as usize)
}

pub(crate) fn sequence_of(vocab: usize, positions: usize, mut index: usize) -> Vec<u32> {
    let mut seq = vec![0u32; positions];
    for d in (0..positions).rev() {
        seq[d] = (index % vocab) as u32;
        index /= vocab;
    }
    seq
}

/// `KL(q ‖ p) = Σ q log(q / max(p, 1e-12))`.
pub fn kl(q: &ExactDistribution, p: &ExactDistribution) -> Result<f64> {
    q.check_same_space(p)?;
    let v: f64 = q
        .probs
        .iter()
        .zip(&p.probs)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi.max(KL_FLOOR)).ln())
        .sum();
    Ok(v.max(0.0))
}
