//! Temperature and top-p modification of teacher logits.
//!
//! Out-of-nucleus categories are lowered by a finite shift instead of being
//! masked with a huge negative sentinel. The sentinel variant is kept only
//! as a negative control: it produces teacher log-probabilities of order
//! `-1e20`, which the generator loss turns into gradient spikes.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_last, softmax_last};
use crate::tensor::Tensor;

/// Value used by the naive top-p masking.
pub const SENTINEL_LOGIT: f64 = -1e20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopPMasking {
    /// Lower out-of-nucleus logits by the configured shift.
    #[default]
    Shift,
    /// Overwrite out-of-nucleus logits with [`SENTINEL_LOGIT`].
    Sentinel,
}

/// Temperature `τ`, top-p `p` and shift `Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitMods {
    pub temperature: f64,
    pub top_p: f64,
    pub shift: f64,
    pub masking: TopPMasking,
}

impl Default for LogitMods {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            shift: 2.0,
            masking: TopPMasking::Shift,
        }
    }
}

impl LogitMods {
    pub fn new(temperature: f64, top_p: f64, shift: f64) -> Self {
        Self {
            temperature,
            top_p,
            shift,
            masking: TopPMasking::Shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} outside (0, 1]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.shift >= 0.0) || !self.shift.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "logit shift {} must be >= 0",
                self.shift
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.temperature == 1.0 && self.top_p >= 1.0
    }
}

/// Indices kept by nucleus selection: categories sorted by probability
/// (descending, lower index first on ties), minimal prefix whose cumulative
/// mass reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<bool> {
    let mut keep = vec![false; probs.len()];
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    for &c in &order {
        keep[c] = true;
        cum += probs[c];
        if cum >= p {
            break;
        }
    }
    keep
}

/// Apply temperature then top-p to rows of log-probabilities.
///
/// The nucleus is computed on the temperature-scaled distribution. The
/// result is a logit tensor (not renormalized).
pub fn apply_logit_surgery(logprobs: &Tensor, mods: &LogitMods) -> Result<Tensor> {
    mods.validate()?;
    let mut out = logprobs.map(|l| l / mods.temperature);
    if mods.top_p >= 1.0 {
        return Ok(out);
    }
    let probs = softmax_last(&out)?;
    for r in 0..out.rows() {
        let keep = nucleus(probs.row(r), mods.top_p);
        for (v, k) in out.row_mut(r).iter_mut().zip(keep) {
            if !k {
                match mods.masking {
                    TopPMasking::Shift => *v -= mods.shift,
                    TopPMasking::Sentinel => *v = SENTINEL_LOGIT,
                }
            }
        }
    }
    Ok(out)
}

/// Modified teacher log-probabilities from raw teacher logits.
pub fn modified_logprobs(raw_logits: &Tensor, mods: &LogitMods) -> Result<Tensor> {
    let lp = log_softmax_last(raw_logits)?;
    if mods.is_identity() {
        return Ok(lp);
    }
    log_softmax_last(&apply_logit_surgery(&lp, mods)?)
}
