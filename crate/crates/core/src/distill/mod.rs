//! Moment-matching distillation of a factorized teacher into a few-step
//! generator, trained against an auxiliary denoiser in alternation.

pub mod surgery;

use std::rc::Rc;

pub use surgery::{apply_logit_surgery, modified_logprobs, nucleus, LogitMods, TopPMasking, SENTINEL_LOGIT};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::data::SyntheticDataset;
use crate::diffusion::{run_reverse_chain, DiffusionProcess, PosteriorMap};
use crate::error::{Error, Result};
use crate::metrics::{exact_chain_distribution, generator_output_entropy, kl, GeneratorPredictor};
use crate::models::{init_from_teacher, Denoiser, Generator};
use crate::numerics::{categorical_sample, log_softmax_last};
use crate::rng::RngState;
use crate::teacher::{row_weights, Weighting};
use crate::tensor::{Tensor, TokenBatch};

pub const DEFAULT_POSTERIOR_DS: f64 = 1.0 / 64.0;

/// Floor inside the logarithm of posterior-transformed vectors.
pub const POSTERIOR_LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossVariant {
    /// Losses on the clean-data vectors `x̂`.
    #[default]
    CrossEntropy,
    /// Losses on posterior vectors `q(z_{s-ds} | z_s, x̂)`.
    PosteriorKl { ds: f64 },
}

impl LossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::CrossEntropy => "cross_entropy",
            LossVariant::PosteriorKl { .. } => "posterior_kl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Student sampling steps `k`.
    pub student_steps: usize,
    /// Teacher temperature, top-p and shift.
    pub mods: LogitMods,
    /// Train the auxiliary model on `x̂_η(z_t)` instead of hard samples.
    pub soft_target: bool,
    /// Auxiliary updates per generator update.
    pub aux_updates_per_gen: usize,
    pub variant: LossVariant,
    pub weighting: Weighting,
    pub batch_size: usize,
    /// Optimizer for the auxiliary model.
    pub adam: AdamConfig,
    /// Generator learning rate as a fraction of `adam.lr`.
    pub gen_lr_scale: f64,
    /// Decay both learning rates linearly over this many steps (0 keeps
    /// them constant).
    pub decay_steps: usize,
    /// Learning-rate multiplier reached at `decay_steps`.
    pub final_lr_fraction: f64,
    /// A gradient norm above this aborts the run.
    pub max_grad_norm: f64,
    /// Force a non-finite loss at this step (fault injection).
    pub fault_step: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_steps: 1,
            mods: LogitMods::default(),
            soft_target: false,
            aux_updates_per_gen: 1,
            variant: LossVariant::CrossEntropy,
            weighting: Weighting::Constant,
            batch_size: 64,
            adam: AdamConfig::default(),
            gen_lr_scale: 0.5,
            decay_steps: 0,
            final_lr_fraction: 0.0,
            max_grad_norm: 1e6,
            fault_step: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, process: &DiffusionProcess) -> Result<()> {
        self.mods.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.student_steps == 0 {
            return bad("student steps must be >= 1");
        }
        if !(self.mods.shift > 0.0) {
            return bad("logit shift must be > 0");
        }
        if self.soft_target && !process.is_masked() {
            return bad("soft auxiliary targets need a masked process");
        }
        if self.aux_updates_per_gen == 0 || self.batch_size == 0 {
            return bad("update ratio and batch size must be >= 1");
        }
        if !(self.gen_lr_scale > 0.0 && self.adam.lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must be in [0, 1]");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if let LossVariant::PosteriorKl { ds } = self.variant {
            if !(ds > 0.0 && ds <= 1.0) {
                return bad("posterior ds must be in (0, 1]");
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return 1.0;
        }
        let progress = (step as f64 / self.decay_steps as f64).min(1.0);
        1.0 - (1.0 - self.final_lr_fraction) * progress
    }

    pub fn auxiliary_adam(&self, step: usize) -> AdamConfig {
        AdamConfig {
            lr: self.adam.lr * self.lr_factor(step),
            ..self.adam
        }
    }

    pub fn generator_adam(&self, step: usize) -> AdamConfig {
        AdamConfig {
            lr: self.adam.lr * self.gen_lr_scale * self.lr_factor(step),
            ..self.adam
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Auxiliary,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Generator => "gen",
            Phase::Auxiliary => "aux",
        }
    }
}

/// Step `i` updates the generator when `i mod (1 + r) = 0`, where `r` is
/// the number of auxiliary updates per generator update.
pub fn phase_of(step: usize, cfg: &DistillConfig) -> Phase {
    if step.is_multiple_of(1 + cfg.aux_updates_per_gen) {
        Phase::Generator
    } else {
        Phase::Auxiliary
    }
}

/// `s ~ U(0,1)`, `δ ~ U(0, 1/k)`, `t = min(1, s + δ)`.
pub fn sample_times(rng: &mut RngState, k: usize) -> (f64, f64) {
    let s = rng.uniform();
    let delta = rng.uniform() / k.max(1) as f64;
    (s, (s + delta).min(1.0))
}

/// Everything sampled for one distillation step. Fixing it makes both
/// losses deterministic functions of the parameters.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub z_t: TokenBatch,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub noise: Tensor,
    /// `x̂_η(z_t)` at the time the batch was drawn, `[B*D, K]`.
    pub gen_probs: Tensor,
    /// Hard clean sample `x ~ Cat(x̂_η)`.
    pub x: TokenBatch,
    pub z_s: TokenBatch,
}

/// Diffuse `data` to `z_t`, run the generator and draw `x` and `z_s`.
pub fn prepare_batch(
    generator: &Generator,
    data: TokenBatch,
    process: &DiffusionProcess,
    k: usize,
    rng: &mut RngState,
) -> Result<DistillBatch> {
    let b = data.batch();
    let (s, t): (Vec<f64>, Vec<f64>) = (0..b).map(|_| sample_times(rng, k)).unzip();
    let z_t = process.diffuse(&data, &t, rng)?;
    let noise = generator.sample_noise(b, rng);
    let gen_probs = generator.probs(&z_t, &t, &noise)?;
    let mut x = categorical_sample(&gen_probs, rng)?;
    x = TokenBatch::new(b, data.positions(), x.tokens().to_vec())?;
    process.carry_over(&mut x, &z_t);
    let z_s = process.posterior_sample_hard(&x, &z_t, &s, &t, rng)?;
    Ok(DistillBatch {
        z_t,
        t,
        s,
        noise,
        gen_probs,
        x,
        z_s,
    })
}

/// `Σ_r w_r Σ_c x̂_η (log x̂_φ − log x̂_θ)`; only `x̂_η` carries gradient.
pub fn generator_loss(
    gen_probs: &Tensor,
    teacher_logp: &Tensor,
    aux_logp: &Tensor,
    row_weights: &[f64],
) -> Result<f64> {
    let coef = generator_coefficients(teacher_logp, aux_logp, row_weights)?;
    weighted_dot(gen_probs, &coef)
}

/// Clean-data target of the auxiliary loss.
#[derive(Debug, Clone)]
pub enum AuxTarget {
    Hard(TokenBatch),
    Soft(Tensor),
}

impl AuxTarget {
    fn rows(&self, k: usize) -> Result<Tensor> {
        match self {
            AuxTarget::Hard(x) => {
                let oh = x.one_hot(k)?;
                oh.reshape(vec![x.tokens().len(), k])
            }
            AuxTarget::Soft(p) => Ok(p.clone()),
        }
    }
}

/// `−Σ_r w_r Σ_c (x + x̂_θ) log x̂_φ`.
pub fn auxiliary_loss(
    target: &AuxTarget,
    teacher_probs: &Tensor,
    aux_logp: &Tensor,
    row_weights: &[f64],
    process: &DiffusionProcess,
) -> Result<f64> {
    check_target(target, process)?;
    let coef = auxiliary_coefficients(&target.rows(process.vocab())?, teacher_probs, row_weights)?;
    weighted_dot(aux_logp, &coef)
}

/// Posterior-space generator loss: `Σ_r w_r Σ_c π(x̂_η)(log π(x̂_φ) − log π(x̂_θ))`.
pub fn generator_loss_posterior(
    gen_probs: &Tensor,
    teacher_probs: &Tensor,
    aux_probs: &Tensor,
    map: &PosteriorMap,
    row_weights: &[f64],
) -> Result<f64> {
    let pt = log_floored(&map.forward(teacher_probs)?);
    let pa = log_floored(&map.forward(aux_probs)?);
    let coef = generator_coefficients(&pt, &pa, row_weights)?;
    weighted_dot(&map.forward(gen_probs)?, &coef)
}

/// Posterior-space auxiliary loss: `CE(π(x) | π(x̂_φ)) + CE(π(x̂_θ) | π(x̂_φ))`.
pub fn auxiliary_loss_posterior(
    target: &AuxTarget,
    teacher_probs: &Tensor,
    aux_probs: &Tensor,
    map: &PosteriorMap,
    row_weights: &[f64],
    process: &DiffusionProcess,
) -> Result<f64> {
    check_target(target, process)?;
    let pt = map.forward(&target.rows(process.vocab())?)?;
    let pth = map.forward(teacher_probs)?;
    let coef = auxiliary_coefficients(&pt, &pth, row_weights)?;
    weighted_dot(&log_floored(&map.forward(aux_probs)?), &coef)
}

fn check_target(target: &AuxTarget, process: &DiffusionProcess) -> Result<()> {
    if matches!(target, AuxTarget::Soft(_)) && !process.is_masked() {
        return Err(Error::InvalidArgument(
            "soft auxiliary targets need a masked process".into(),
        ));
    }
    Ok(())
}

fn log_floored(t: &Tensor) -> Tensor {
    t.map(|v| v.max(POSTERIOR_LOG_FLOOR).ln())
}

fn weighted_dot(a: &Tensor, coef: &Tensor) -> Result<f64> {
    if a.shape() != coef.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), coef.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(coef.data())
        .filter(|(_, &c)| c != 0.0)
        .map(|(x, c)| x * c)
        .sum())
}

fn check_rows(tensors: &[&Tensor], row_weights: &[f64]) -> Result<()> {
    let shape = tensors[0].shape();
    if tensors.iter().any(|t| t.shape() != shape) || tensors[0].rows() != row_weights.len() {
        return Err(Error::Shape("loss inputs disagree in shape".into()));
    }
    Ok(())
}

fn generator_coefficients(teacher_logp: &Tensor, aux_logp: &Tensor, w: &[f64]) -> Result<Tensor> {
    check_rows(&[teacher_logp, aux_logp], w)?;
    let k = teacher_logp.cols();
    let data = teacher_logp
        .data()
        .iter()
        .zip(aux_logp.data())
        .enumerate()
        .map(|(i, (th, ph))| {
            let wr = w[i / k];
            if wr == 0.0 {
                0.0
            } else {
                wr * (ph - th)
            }
        })
        .collect();
    Tensor::new(teacher_logp.shape().to_vec(), data)
}

fn auxiliary_coefficients(target: &Tensor, teacher_probs: &Tensor, w: &[f64]) -> Result<Tensor> {
    check_rows(&[target, teacher_probs], w)?;
    let k = target.cols();
    let data = target
        .data()
        .iter()
        .zip(teacher_probs.data())
        .enumerate()
        .map(|(i, (x, th))| -w[i / k] * (x + th))
        .collect();
    Tensor::new(target.shape().to_vec(), data)
}

/// Teacher and auxiliary quantities at `(z_s, s)`; constants for both
/// losses.
struct Targets {
    teacher_logp: Tensor,
    teacher_probs: Tensor,
    row_weights: Vec<f64>,
}

fn targets(
    teacher: &Denoiser,
    batch: &DistillBatch,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<Targets> {
    let raw = teacher.logits(&batch.z_s, &batch.s)?;
    let teacher_logp = modified_logprobs(&raw, &cfg.mods)?;
    let teacher_probs = teacher_logp.map(f64::exp);
    let row_weights = row_weights(process, &batch.z_s, &batch.s, cfg.weighting);
    Ok(Targets {
        teacher_logp,
        teacher_probs,
        row_weights,
    })
}

/// Rows that carry weight, and a posterior map from `s` to `s - ds` for
/// exactly those rows conditioned on `z_s`.
fn counted_posterior(
    batch: &DistillBatch,
    process: &DiffusionProcess,
    row_weights: &[f64],
    ds: f64,
) -> Result<(Vec<usize>, Rc<PosteriorMap>, Vec<f64>)> {
    let d = batch.z_s.positions();
    let rows: Vec<usize> = (0..row_weights.len()).filter(|&r| row_weights[r] != 0.0).collect();
    let z = TokenBatch::new(rows.len(), 1, rows.iter().map(|&r| batch.z_s.tokens()[r]).collect())?;
    let hi: Vec<f64> = rows.iter().map(|&r| batch.s[r / d]).collect();
    let lo: Vec<f64> = hi.iter().map(|&s| (s - ds).max(0.0)).collect();
    let map = process.posterior_map(&z, &lo, &hi)?;
    let w = rows.iter().map(|&r| row_weights[r]).collect();
    Ok((rows, Rc::new(map), w))
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let k = t.cols();
    let mut out = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), k], out)
}

/// Record the generator loss for a fixed batch on `g`. Teacher and
/// auxiliary outputs enter as constants.
pub fn generator_loss_graph(
    g: &mut Graph,
    generator: &Generator,
    aux: &Denoiser,
    teacher: &Denoiser,
    batch: &DistillBatch,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<Var> {
    let tg = targets(teacher, batch, process, cfg)?;
    let logits = generator.forward(g, &batch.z_t, &batch.t, &batch.noise)?;
    let probs = g.softmax(logits)?;
    let aux_logits = aux.logits(&batch.z_s, &batch.s)?;
    match cfg.variant {
        LossVariant::CrossEntropy => {
            let aux_logp = log_softmax_last(&aux_logits)?;
            let coef = generator_coefficients(&tg.teacher_logp, &aux_logp, &tg.row_weights)?;
            g.dot_const(probs, coef)
        }
        LossVariant::PosteriorKl { ds } => {
            let (rows, map, w) = counted_posterior(batch, process, &tg.row_weights, ds)?;
            let aux_probs = log_softmax_last(&aux_logits)?.map(f64::exp);
            let pt = log_floored(&map.forward(&select_rows(&tg.teacher_probs, &rows)?)?);
            let pa = log_floored(&map.forward(&select_rows(&aux_probs, &rows)?)?);
            let coef = generator_coefficients(&pt, &pa, &w)?;
            let sub = g.gather(probs, rows)?;
            let post = g.posterior(sub, map)?;
            g.dot_const(post, coef)
        }
    }
}

/// Record the auxiliary loss for a fixed batch on `g`.
pub fn auxiliary_loss_graph(
    g: &mut Graph,
    aux: &Denoiser,
    teacher: &Denoiser,
    batch: &DistillBatch,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<Var> {
    let tg = targets(teacher, batch, process, cfg)?;
    let target = if cfg.soft_target {
        AuxTarget::Soft(batch.gen_probs.clone())
    } else {
        AuxTarget::Hard(batch.x.clone())
    };
    check_target(&target, process)?;
    let target_rows = target.rows(process.vocab())?;
    let logits = aux.forward(g, &batch.z_s, &batch.s)?;
    match cfg.variant {
        LossVariant::CrossEntropy => {
            let logp = g.log_softmax(logits)?;
            let coef = auxiliary_coefficients(&target_rows, &tg.teacher_probs, &tg.row_weights)?;
            g.dot_const(logp, coef)
        }
        LossVariant::PosteriorKl { ds } => {
            let (rows, map, w) = counted_posterior(batch, process, &tg.row_weights, ds)?;
            let pt = map.forward(&select_rows(&target_rows, &rows)?)?;
            let pth = map.forward(&select_rows(&tg.teacher_probs, &rows)?)?;
            let coef = auxiliary_coefficients(&pt, &pth, &w)?;
            let probs = g.softmax(logits)?;
            let sub = g.gather(probs, rows)?;
            let post = g.posterior(sub, map)?;
            let logp = g.log_floor(post, POSTERIOR_LOG_FLOOR);
            g.dot_const(logp, coef)
        }
    }
}

/// Generator loss and its gradient for a fixed batch, accumulated into
/// `params` (laid out for `template`'s config).
pub fn generator_loss_with_grad(
    template: &Generator,
    params: &mut ParamStore,
    aux: &Denoiser,
    teacher: &Denoiser,
    batch: &DistillBatch,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut generator = Generator::from_parts(template.config().clone(), std::mem::take(params))?;
    let mut g = Graph::new();
    let out = generator_loss_graph(&mut g, &generator, aux, teacher, batch, process, cfg).and_then(|loss| {
        g.backward(loss, &mut [generator.params_mut()])?;
        Ok(g.value(loss).item())
    });
    *params = generator.into_params();
    out
}

/// Auxiliary loss and its gradient for a fixed batch.
pub fn auxiliary_loss_with_grad(
    template: &Denoiser,
    params: &mut ParamStore,
    teacher: &Denoiser,
    batch: &DistillBatch,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut aux = Denoiser::from_parts(template.config().clone(), std::mem::take(params))?;
    let mut g = Graph::new();
    let out = auxiliary_loss_graph(&mut g, &aux, teacher, batch, process, cfg).and_then(|loss| {
        g.backward(loss, &mut [aux.params_mut()])?;
        Ok(g.value(loss).item())
    });
    *params = aux.into_params();
    out
}

/// Generator, auxiliary model, their optimizer states, the step counter
/// and the training random stream: everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub generator: Generator,
    pub aux: Denoiser,
    pub gen_adam: AdamState,
    pub aux_adam: AdamState,
    pub step: usize,
    pub rng: RngState,
}

impl DistillState {
    pub fn from_teacher(teacher: &Denoiser, n_noise: usize, rng: RngState) -> Result<Self> {
        let (generator, aux) = init_from_teacher(teacher, n_noise)?;
        Ok(Self {
            gen_adam: AdamState::new(generator.params().len()),
            aux_adam: AdamState::new(aux.params().len()),
            generator,
            aux,
            step: 0,
            rng,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm: f64,
}

fn diagnostic(step: usize, phase: Phase, loss: f64, grad_norm: f64, cfg: &DistillConfig, max_logit: f64) -> String {
    format!(
        "step={step} phase={} loss={loss:e} grad_norm={grad_norm:e} temperature={} top_p={} shift={} max_teacher_logit={max_logit:e}",
        phase.name(),
        cfg.mods.temperature,
        cfg.mods.top_p,
        cfg.mods.shift
    )
}

/// One alternating update. The model not being updated is left untouched.
pub fn distill_step(
    state: &mut DistillState,
    teacher: &Denoiser,
    dataset: &SyntheticDataset,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
) -> Result<StepReport> {
    let step = state.step;
    let phase = phase_of(step, cfg);
    let data = dataset.sample(cfg.batch_size, &mut state.rng);
    let batch = prepare_batch(&state.generator, data, process, cfg.student_steps, &mut state.rng)?;
    let mut g = Graph::new();
    let (loss, store) = match phase {
        Phase::Generator => (
            generator_loss_graph(&mut g, &state.generator, &state.aux, teacher, &batch, process, cfg)?,
            state.generator.params_mut(),
        ),
        Phase::Auxiliary => (
            auxiliary_loss_graph(&mut g, &state.aux, teacher, &batch, process, cfg)?,
            state.aux.params_mut(),
        ),
    };
    let mut value = g.value(loss).item();
    if cfg.fault_step == Some(step) {
        value = f64::NAN;
    }
    let max_logit = || {
        teacher
            .logits(&batch.z_s, &batch.s)
            .and_then(|l| apply_logit_surgery(&log_softmax_last(&l)?, &cfg.mods))
            .map(|l| l.max_abs())
            .unwrap_or(f64::NAN)
    };
    if !value.is_finite() {
        let msg = diagnostic(step, phase, value, f64::NAN, cfg, max_logit());
        log::error!("non-finite distillation loss: {msg}");
        return Err(Error::Divergence(msg));
    }
    store.zero_grads();
    g.backward(loss, &mut [&mut *store])?;
    let grad_norm = store.grad_norm();
    if !(grad_norm <= cfg.max_grad_norm) {
        let msg = diagnostic(step, phase, value, grad_norm, cfg, max_logit());
        log::error!("gradient spike: {msg}");
        return Err(Error::Divergence(msg));
    }
    match phase {
        Phase::Generator => adam_step(
            state.generator.params_mut(),
            &cfg.generator_adam(step),
            &mut state.gen_adam,
        )?,
        Phase::Auxiliary => adam_step(state.aux.params_mut(), &cfg.auxiliary_adam(step), &mut state.aux_adam)?,
    }
    state.step += 1;
    Ok(StepReport {
        step,
        phase,
        loss: value,
        grad_norm,
    })
}

/// `k`-step student sampling with fresh noise at every step.
pub fn student_sample(
    generator: &Generator,
    process: &DiffusionProcess,
    k: usize,
    batch: usize,
    rng: &mut RngState,
) -> Result<TokenBatch> {
    run_reverse_chain(process, k, batch, generator.config().seq_len, rng, |z, t, rng| {
        let noise = generator.sample_noise(z.batch(), rng);
        generator.probs(z, &vec![t; z.batch()], &noise)
    })
}

/// Periodic evaluation during [`run_distillation`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillEval {
    /// Compute the generator output entropy every this many steps (0 disables).
    pub entropy_every: usize,
    pub entropy_probes: usize,
    /// Compute the exact-chain KL every this many steps (0 disables).
    pub kl_every: usize,
    pub noise_draws: usize,
    pub noise_seed: u64,
}

impl Default for DistillEval {
    fn default() -> Self {
        Self {
            entropy_every: 100,
            entropy_probes: 64,
            kl_every: 1000,
            noise_draws: crate::metrics::DEFAULT_NOISE_DRAWS,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLogRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub gen_output_entropy: Option<f64>,
    pub eval_kl: Option<f64>,
}

/// Exact KL from `q` to the `k`-step student chain.
pub fn student_kl(
    generator: &Generator,
    dataset: &SyntheticDataset,
    process: &DiffusionProcess,
    k: usize,
    noise_draws: usize,
    noise_seed: u64,
) -> Result<f64> {
    let q = dataset.exact()?;
    let predictor = GeneratorPredictor::new(generator, noise_draws, noise_seed);
    let p = exact_chain_distribution(&predictor, process, dataset.positions(), k)?;
    kl(&q, &p)
}

/// Run distillation steps until `state.step == until`, reporting each row.
///
/// Evaluation draws come from streams derived from the step index, so they
/// never perturb the training stream.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation(
    state: &mut DistillState,
    teacher: &Denoiser,
    dataset: &SyntheticDataset,
    process: &DiffusionProcess,
    cfg: &DistillConfig,
    until: usize,
    eval: &DistillEval,
    mut on_row: impl FnMut(&DistillLogRow) -> Result<()>,
) -> Result<()> {
    cfg.validate(process)?;
    if !state.generator.config().same_backbone(teacher.config()) || !teacher.config().matches(process) {
        return Err(Error::InvalidArgument(
            "teacher, student and process are incompatible".into(),
        ));
    }
    while state.step < until {
        let report = distill_step(state, teacher, dataset, process, cfg)?;
        let done = report.step + 1;
        let due = |every: usize| every > 0 && done % every == 0;
        let gen_output_entropy = if due(eval.entropy_every) {
            let mut rng = state.rng.derive(report.step as u64);
            Some(generator_output_entropy(
                &state.generator,
                process,
                eval.entropy_probes,
                &mut rng,
            )?)
        } else {
            None
        };
        let eval_kl = if due(eval.kl_every) && dataset.exact().is_ok() {
            Some(student_kl(
                &state.generator,
                dataset,
                process,
                cfg.student_steps,
                eval.noise_draws,
                eval.noise_seed,
            )?)
        } else {
            None
        };
        on_row(&DistillLogRow {
            step: report.step,
            phase: report.phase,
            loss: report.loss,
            gen_output_entropy,
            eval_kl,
        })?;
    }
    Ok(())
}
