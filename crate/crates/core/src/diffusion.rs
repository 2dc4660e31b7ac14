//! Masked and uniform forward processes, the analytic posterior
//! `q(z_s | z_t, x)`, and ancestral sampling.
//!
//! States live in the *input* vocabulary: the data tokens `0..K` plus, for
//! masked processes, the MASK token `K`. Clean-data vectors `x` live in the
//! data vocabulary of size `K` and are zero-padded at MASK.

use crate::distill::surgery::{apply_logit_surgery, LogitMods};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_last, sample_row, softmax_last};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

/// Smallest admissible posterior normalizer.
const MIN_DENOMINATOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSchedule {
    /// `α(t) = 1 - t`
    #[default]
    Linear,
    /// `α(t) = cos(πt/2)`
    Cosine,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if t >= 1.0 {
            return 0.0;
        }
        match self {
            NoiseSchedule::Linear => 1.0 - t,
            NoiseSchedule::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    /// `dα/dt`.
    pub fn alpha_derivative(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Linear => -1.0,
            NoiseSchedule::Cosine => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t.clamp(0.0, 1.0)).sin()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSchedule::Linear => "linear",
            NoiseSchedule::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Masked,
    Uniform,
}

impl ProcessKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessKind::Masked => "masked",
            ProcessKind::Uniform => "uniform",
        }
    }
}

/// Forward process interpolating data toward a factorized stationary
/// distribution `π`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionProcess {
    kind: ProcessKind,
    vocab: usize,
    schedule: NoiseSchedule,
    pi: Vec<f64>,
}

impl DiffusionProcess {
    pub fn new(kind: ProcessKind, vocab: usize, schedule: NoiseSchedule) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocabulary needs at least 2 tokens".into()));
        }
        let pi = match kind {
            ProcessKind::Masked => {
                let mut p = vec![0.0; vocab + 1];
                p[vocab] = 1.0;
                p
            }
            ProcessKind::Uniform => vec![1.0 / vocab as f64; vocab],
        };
        Ok(Self {
            kind,
            vocab,
            schedule,
            pi,
        })
    }

    pub fn masked(vocab: usize) -> Self {
        Self::new(ProcessKind::Masked, vocab, NoiseSchedule::Linear).expect("vocab >= 2")
    }

    pub fn uniform(vocab: usize) -> Self {
        Self::new(ProcessKind::Uniform, vocab, NoiseSchedule::Linear).expect("vocab >= 2")
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    /// Data vocabulary size `K`.
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Number of distinct states a position can take.
    pub fn state_vocab(&self) -> usize {
        self.pi.len()
    }

    pub fn mask_token(&self) -> Option<u32> {
        match self.kind {
            ProcessKind::Masked => Some(self.vocab as u32),
            ProcessKind::Uniform => None,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.kind == ProcessKind::Masked
    }

    /// Copy unmasked states of `z` into the clean sample `x`: under
    /// absorbing noise they are already the clean token.
    pub fn carry_over(&self, x: &mut TokenBatch, z: &TokenBatch) {
        if let Some(m) = self.mask_token() {
            for (xt, &zt) in x.tokens_mut().iter_mut().zip(z.tokens()) {
                if zt != m {
                    *xt = zt;
                }
            }
        }
    }

    /// Stationary distribution over states.
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.schedule.alpha(t)
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn draw_prior(&self, rng: &mut RngState) -> u32 {
        match self.kind {
            ProcessKind::Masked => self.vocab as u32,
            ProcessKind::Uniform => rng.below(self.vocab) as u32,
        }
    }

    /// `z_1 ~ π` for every position.
    pub fn sample_prior(&self, batch: usize, positions: usize, rng: &mut RngState) -> TokenBatch {
        let tokens = (0..batch * positions).map(|_| self.draw_prior(rng)).collect();
        TokenBatch::new(batch, positions, tokens).expect("sized")
    }

    /// A draw of the `t = 1` state; constant for masked processes.
    pub fn fully_noised(&self, batch: usize, positions: usize, rng: &mut RngState) -> TokenBatch {
        self.sample_prior(batch, positions, rng)
    }

    /// `z_t ~ Cat(α_t x + (1-α_t) π)` with one time per batch row.
    pub fn diffuse(&self, x: &TokenBatch, t: &[f64], rng: &mut RngState) -> Result<TokenBatch> {
        if t.len() != x.batch() {
            return Err(Error::Shape(format!("{} times for batch of {}", t.len(), x.batch())));
        }
        x.validate(self.vocab)?;
        let mut out = x.clone();
        let d = x.positions();
        for (b, &tb) in t.iter().enumerate() {
            Self::check_time(tb)?;
            let a = self.alpha(tb);
            for pos in 0..d {
                let u = rng.uniform();
                if u >= a {
                    out.tokens_mut()[b * d + pos] = self.draw_prior(rng);
                }
            }
        }
        Ok(out)
    }

    /// Same time for every row.
    pub fn diffuse_at(&self, x: &TokenBatch, t: f64, rng: &mut RngState) -> Result<TokenBatch> {
        self.diffuse(x, &vec![t; x.batch()], rng)
    }

    /// Posterior map for the rows of `z_t` between per-row times `s ≤ t`.
    pub fn posterior_map(&self, z_t: &TokenBatch, s: &[f64], t: &[f64]) -> Result<PosteriorMap> {
        if s.len() != z_t.batch() || t.len() != z_t.batch() {
            return Err(Error::Shape("posterior times must match the batch".into()));
        }
        z_t.validate(self.state_vocab())?;
        let d = z_t.positions();
        let mut alpha_s = Vec::with_capacity(z_t.tokens().len());
        let mut alpha_t = Vec::with_capacity(z_t.tokens().len());
        for (&sb, &tb) in s.iter().zip(t) {
            Self::check_time(sb)?;
            Self::check_time(tb)?;
            if sb > tb {
                return Err(Error::InvalidArgument(format!(
                    "posterior needs s <= t, got {sb} > {tb}"
                )));
            }
            let (a_s, a_t) = (self.alpha(sb), self.alpha(tb));
            for _ in 0..d {
                alpha_s.push(a_s);
                alpha_t.push(if sb == tb { a_s } else { a_t });
            }
        }
        Ok(PosteriorMap {
            z: z_t.tokens().to_vec(),
            alpha_s,
            alpha_t,
            pi: self.pi.clone(),
            data_vocab: self.vocab,
        })
    }

    /// `q(z_s | z_t, x)` for probability rows `x` of shape `[B, D, K]`
    /// (one-hot for hard data, any simplex row for soft data). Returns
    /// `[B, D, state_vocab]`.
    pub fn posterior(&self, x: &Tensor, z_t: &TokenBatch, s: f64, t: f64) -> Result<Tensor> {
        let b = z_t.batch();
        self.posterior_rows(x, z_t, &vec![s; b], &vec![t; b])
    }

    pub fn posterior_rows(&self, x: &Tensor, z_t: &TokenBatch, s: &[f64], t: &[f64]) -> Result<Tensor> {
        let map = self.posterior_map(z_t, s, t)?;
        let out = map.forward(x)?;
        out.reshape(vec![z_t.batch(), z_t.positions(), self.state_vocab()])
    }

    /// Draw `z_s ~ q(z_s | z_t, x)` per position.
    pub fn posterior_sample(
        &self,
        x: &Tensor,
        z_t: &TokenBatch,
        s: &[f64],
        t: &[f64],
        rng: &mut RngState,
    ) -> Result<TokenBatch> {
        let probs = self.posterior_rows(x, z_t, s, t)?;
        let mut out = z_t.clone();
        for (r, tok) in out.tokens_mut().iter_mut().enumerate() {
            *tok = sample_row(probs.row(r), rng) as u32;
        }
        Ok(out)
    }

    /// Posterior of a hard clean sample.
    pub fn posterior_sample_hard(
        &self,
        x: &TokenBatch,
        z_t: &TokenBatch,
        s: &[f64],
        t: &[f64],
        rng: &mut RngState,
    ) -> Result<TokenBatch> {
        let onehot = x.one_hot(self.vocab)?;
        self.posterior_sample(&onehot, z_t, s, t, rng)
    }

    /// Per-position transition from state `z` to every next state when the
    /// clean token is drawn from `x_hat` and then pushed through the
    /// posterior: `Σ_c x̂_c q(z_s | z, e_c)`.
    /// Unmasked states of a masked process carry over whatever `x_hat` says.
    pub fn marginal_transition(&self, x_hat: &[f64], z: u32, s: f64, t: f64) -> Result<Vec<f64>> {
        if self.mask_token().is_some_and(|m| z != m) && (z as usize) < self.vocab {
            let mut out = vec![0.0; self.state_vocab()];
            out[z as usize] = 1.0;
            return Ok(out);
        }
        let zb = TokenBatch::new(1, 1, vec![z])?;
        let map = self.posterior_map(&zb, &[s], &[t])?;
        let sv = self.state_vocab();
        let mut out = vec![0.0; sv];
        let mut onehot = vec![0.0; self.vocab];
        for (c, &w) in x_hat.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            onehot.iter_mut().for_each(|v| *v = 0.0);
            onehot[c] = 1.0;
            let row = match map.row(0, &onehot) {
                Ok(r) => r,
                // x = e_c is inconsistent with z; it carries no mass.
                Err(Error::DegeneratePosterior { .. }) => continue,
                Err(e) => return Err(e),
            };
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        let total: f64 = out.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegeneratePosterior { z, denominator: 0.0 });
        }
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    }
}

/// Row-wise posterior transform with fixed `z_t`, `α_s`, `α_t`; linear in
/// the numerator and affine in the normalizer, differentiable in `x`.
#[derive(Debug, Clone)]
pub struct PosteriorMap {
    z: Vec<u32>,
    alpha_s: Vec<f64>,
    alpha_t: Vec<f64>,
    pi: Vec<f64>,
    data_vocab: usize,
}

impl PosteriorMap {
    pub fn rows(&self) -> usize {
        self.z.len()
    }

    fn ratio(&self, r: usize) -> f64 {
        let a_s = self.alpha_s[r];
        if a_s == 0.0 {
            1.0
        } else {
            (self.alpha_t[r] / a_s).min(1.0)
        }
    }

    fn x_at(&self, x: &[f64], c: usize) -> f64 {
        if c < self.data_vocab {
            x[c]
        } else {
            0.0
        }
    }

    fn denominator(&self, r: usize, x: &[f64]) -> Result<f64> {
        let z = self.z[r] as usize;
        let a_t = self.alpha_t[r];
        let den = a_t * self.x_at(x, z) + (1.0 - a_t) * self.pi[z];
        if !(den >= MIN_DENOMINATOR) {
            return Err(Error::DegeneratePosterior {
                z: self.z[r],
                denominator: den,
            });
        }
        Ok(den)
    }

    /// Posterior vector for row `r` given clean probabilities `x`.
    pub fn row(&self, r: usize, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.z[r] as usize;
        let ratio = self.ratio(r);
        let a_s = self.alpha_s[r];
        let pz = self.pi[z];
        let den = self.denominator(r, x)?;
        let mut out: Vec<f64> = (0..self.pi.len())
            .map(|c| {
                let first = if c == z {
                    ratio + (1.0 - ratio) * pz
                } else {
                    (1.0 - ratio) * pz
                };
                first * (a_s * self.x_at(x, c) + (1.0 - a_s) * self.pi[c]) / den
            })
            .collect();
        // A single-support row is the point mass on `z`; its value is locally
        // constant in `x`, so snapping removes roundoff without changing the
        // Jacobian.
        if out.iter().filter(|&&v| v != 0.0).count() == 1 {
            out.iter_mut().for_each(|v| *v = if *v != 0.0 { 1.0 } else { 0.0 });
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.data_vocab || x.rows() != self.rows() {
            return Err(Error::Shape(format!(
                "posterior expects {} rows of width {}, got {:?}",
                self.rows(),
                self.data_vocab,
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(self.rows() * self.pi.len());
        for r in 0..self.rows() {
            out.extend(self.row(r, x.row(r))?);
        }
        Tensor::new(vec![self.rows(), self.pi.len()], out)
    }

    /// Vector-Jacobian product for [`PosteriorMap::forward`].
    pub fn backward(&self, x: &Tensor, out: &Tensor, g: &[f64]) -> Vec<f64> {
        let k = self.data_vocab;
        let sv = self.pi.len();
        let mut dx = vec![0.0; self.rows() * k];
        for r in 0..self.rows() {
            let z = self.z[r] as usize;
            let ratio = self.ratio(r);
            let a_s = self.alpha_s[r];
            let a_t = self.alpha_t[r];
            let pz = self.pi[z];
            let xr = x.row(r);
            let den = a_t * self.x_at(xr, z) + (1.0 - a_t) * pz;
            let gr = &g[r * sv..(r + 1) * sv];
            let or = &out.data()[r * sv..(r + 1) * sv];
            let g_dot_out: f64 = gr.iter().zip(or).map(|(a, b)| a * b).sum();
            for j in 0..k {
                let first = if j == z {
                    ratio + (1.0 - ratio) * pz
                } else {
                    (1.0 - ratio) * pz
                };
                let mut d = gr[j] * first * a_s / den;
                if j == z {
                    d -= g_dot_out * a_t / den;
                }
                dx[r * k + j] = d;
            }
        }
        dx
    }
}

/// Run a reverse chain on the uniform grid `t_i = 1 - i/steps`.
///
/// `predict` maps `(z_t, t)` to clean-probability rows `[B*D, K]`. Clean
/// tokens are drawn from those rows independently per position, then
/// `z_s` is drawn from the posterior.
pub fn run_reverse_chain<F>(
    process: &DiffusionProcess,
    steps: usize,
    batch: usize,
    positions: usize,
    rng: &mut RngState,
    mut predict: F,
) -> Result<TokenBatch>
where
    F: FnMut(&TokenBatch, f64, &mut RngState) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let mut z = process.sample_prior(batch, positions, rng);
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let s = if i + 1 == steps {
            0.0
        } else {
            1.0 - (i + 1) as f64 / steps as f64
        };
        let probs = predict(&z, t, rng)?;
        let mut x = TokenBatch::filled(batch, positions, 0);
        for (r, tok) in x.tokens_mut().iter_mut().enumerate() {
            *tok = sample_row(probs.row(r), rng) as u32;
        }
        process.carry_over(&mut x, &z);
        z = process.posterior_sample_hard(&x, &z, &vec![s; batch], &vec![t; batch], rng)?;
    }
    Ok(z)
}

/// Clean probabilities from raw logits after optional logit surgery.
pub fn probs_from_logits(logits: &Tensor, mods: &LogitMods) -> Result<Tensor> {
    if mods.is_identity() {
        return softmax_last(logits);
    }
    let lp = log_softmax_last(logits)?;
    softmax_last(&apply_logit_surgery(&lp, mods)?)
}

/// Ancestral sampling from a denoiser with `steps` uniform steps.
pub fn ancestral_sample(
    model: &crate::models::Denoiser,
    process: &DiffusionProcess,
    steps: usize,
    mods: &LogitMods,
    batch: usize,
    rng: &mut RngState,
) -> Result<TokenBatch> {
    let positions = model.config().seq_len;
    run_reverse_chain(process, steps, batch, positions, rng, |z, t, _| {
        let logits = model.logits(z, &vec![t; z.batch()])?;
        probs_from_logits(&logits, mods)
    })
}
