//! Synthetic categorical datasets with exact probability tables.

use crate::error::{Error, Result};
use crate::metrics::exact::{check_enumerable, sequence_of};
use crate::metrics::ExactDistribution;
use crate::numerics::{check_simplex_row, sample_row};
use crate::rng::RngState;
use crate::tensor::TokenBatch;

/// One mode of a [`DatasetKind::ModeMixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub tokens: Vec<u32>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Every position copies one uniformly drawn token.
    CorrelatedBits,
    /// Draw a mode by weight, then resample each position uniformly with
    /// probability `noise`.
    ModeMixture { modes: Vec<Mode>, noise: f64 },
    /// First token from `initial`, each next token from row
    /// `transition[previous]`.
    MarkovChain {
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    kind: DatasetKind,
    positions: usize,
    vocab: usize,
}

impl SyntheticDataset {
    pub fn new(kind: DatasetKind, positions: usize, vocab: usize) -> Result<Self> {
        if positions == 0 || vocab < 2 {
            return Err(Error::InvalidArgument(
                "dataset needs positions >= 1 and vocab >= 2".into(),
            ));
        }
        match &kind {
            DatasetKind::CorrelatedBits => {}
            DatasetKind::ModeMixture { modes, noise } => {
                if modes.is_empty() {
                    return Err(Error::InvalidArgument("mode mixture needs a mode".into()));
                }
                if !(0.0..=1.0).contains(noise) {
                    return Err(Error::InvalidArgument(format!("mode noise {noise} outside [0, 1]")));
                }
                for m in modes {
                    if m.tokens.len() != positions || m.tokens.iter().any(|&t| t as usize >= vocab) {
                        return Err(Error::InvalidArgument(format!("mode {:?} does not fit", m.tokens)));
                    }
                    if !(m.weight.is_finite() && m.weight > 0.0) {
                        return Err(Error::InvalidArgument(format!("mode weight {}", m.weight)));
                    }
                }
            }
            DatasetKind::MarkovChain { initial, transition } => {
                if initial.len() != vocab || transition.len() != vocab {
                    return Err(Error::InvalidArgument("markov tables must have vocab rows".into()));
                }
                check_simplex_row(initial, 1e-9)?;
                for row in transition {
                    if row.len() != vocab {
                        return Err(Error::InvalidArgument("markov rows must have vocab entries".into()));
                    }
                    check_simplex_row(row, 1e-9)?;
                }
            }
        }
        Ok(Self { kind, positions, vocab })
    }

    pub fn correlated_bits(positions: usize, vocab: usize) -> Result<Self> {
        Self::new(DatasetKind::CorrelatedBits, positions, vocab)
    }

    /// Positions drawn i.i.d. from `marginal`.
    pub fn independent(positions: usize, marginal: Vec<f64>) -> Result<Self> {
        let vocab = marginal.len();
        let transition = vec![marginal.clone(); vocab];
        Self::new(
            DatasetKind::MarkovChain {
                initial: marginal,
                transition,
            },
            positions,
            vocab,
        )
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn sample(&self, batch: usize, rng: &mut RngState) -> TokenBatch {
        let (d, k) = (self.positions, self.vocab);
        let mut tokens = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            match &self.kind {
                DatasetKind::CorrelatedBits => {
                    let c = rng.below(k) as u32;
                    tokens.extend(std::iter::repeat_n(c, d));
                }
                DatasetKind::ModeMixture { modes, noise } => {
                    let weights: Vec<f64> = modes.iter().map(|m| m.weight).collect();
                    let total: f64 = weights.iter().sum();
                    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                    let mode = &modes[sample_row(&probs, rng)];
                    for &tok in &mode.tokens {
                        if rng.uniform() < *noise {
                            tokens.push(rng.below(k) as u32);
                        } else {
                            tokens.push(tok);
                        }
                    }
                }
                DatasetKind::MarkovChain { initial, transition } => {
                    let mut prev = sample_row(initial, rng);
                    tokens.push(prev as u32);
                    for _ in 1..d {
                        prev = sample_row(&transition[prev], rng);
                        tokens.push(prev as u32);
                    }
                }
            }
        }
        TokenBatch::new(batch, d, tokens).expect("sized")
    }

    /// `q(x)` for one sequence.
    pub fn probability(&self, seq: &[u32]) -> f64 {
        let k = self.vocab;
        match &self.kind {
            DatasetKind::CorrelatedBits => {
                if seq.iter().all(|&x| x == seq[0]) {
                    1.0 / k as f64
                } else {
                    0.0
                }
            }
            DatasetKind::ModeMixture { modes, noise } => {
                let total: f64 = modes.iter().map(|m| m.weight).sum();
                modes
                    .iter()
                    .map(|m| {
                        let like: f64 = m
                            .tokens
                            .iter()
                            .zip(seq)
                            .map(|(&a, &b)| if a == b { 1.0 - noise } else { 0.0 } + noise / k as f64)
                            .product();
                        m.weight / total * like
                    })
                    .sum()
            }
            DatasetKind::MarkovChain { initial, transition } => {
                let mut p = initial[seq[0] as usize];
                for w in seq.windows(2) {
                    p *= transition[w[0] as usize][w[1] as usize];
                }
                p
            }
        }
    }

    /// Exact table over all `K^D` sequences (`D, K ≤ 4`).
    pub fn exact(&self) -> Result<ExactDistribution> {
        check_enumerable(self.vocab, self.positions)?;
        let n = self.vocab.pow(self.positions as u32);
        let probs = (0..n)
            .map(|i| self.probability(&sequence_of(self.vocab, self.positions, i)))
            .collect();
        ExactDistribution::from_weights(self.vocab, self.positions, probs)
    }
}
