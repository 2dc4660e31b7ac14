//! Weighted cross-entropy training of a denoiser on a synthetic dataset.

use std::time::Instant;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::data::SyntheticDataset;
use crate::diffusion::{DiffusionProcess, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{exact_chain_distribution, kl, DenoiserPredictor};
use crate::models::Denoiser;
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

/// Loss weight `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Constant,
    /// `-α'(t) / (1 - α(t))`, with the denominator floored at
    /// [`MDLM_MIN_DENOMINATOR`].
    Mdlm,
}

pub const MDLM_MIN_DENOMINATOR: f64 = 1e-3;

impl Weighting {
    pub fn weight(&self, schedule: NoiseSchedule, t: f64) -> f64 {
        match self {
            Weighting::Constant => 1.0,
            Weighting::Mdlm => -schedule.alpha_derivative(t) / (1.0 - schedule.alpha(t)).max(MDLM_MIN_DENOMINATOR),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Weighting::Constant => "constant",
            Weighting::Mdlm => "mdlm",
        }
    }
}

/// A diffused batch with its clean data and times, fixed so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub x: TokenBatch,
    pub z_t: TokenBatch,
    pub t: Vec<f64>,
}

impl TeacherBatch {
    /// Per-example `t ~ U(0,1)` and `z_t = diffuse(x, t)`.
    pub fn draw(x: TokenBatch, process: &DiffusionProcess, rng: &mut RngState) -> Result<Self> {
        let t: Vec<f64> = (0..x.batch()).map(|_| rng.uniform()).collect();
        let z_t = process.diffuse(&x, &t, rng)?;
        Ok(Self { x, z_t, t })
    }
}

/// Per-row loss coefficients: rows that count get `w(t_b) / n_counted`.
/// Masked processes count only positions whose state is MASK.
pub(crate) fn row_weights(process: &DiffusionProcess, z: &TokenBatch, times: &[f64], weighting: Weighting) -> Vec<f64> {
    let d = z.positions();
    let mask = process.mask_token();
    let counted: Vec<bool> = z.tokens().iter().map(|&tok| mask.is_none_or(|m| tok == m)).collect();
    let n = counted.iter().filter(|&&c| c).count();
    if n == 0 {
        return vec![0.0; counted.len()];
    }
    counted
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            if c {
                weighting.weight(process.schedule(), times[r / d]) / n as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Record the teacher loss for a fixed batch on `g`.
pub fn teacher_loss_graph(
    g: &mut Graph,
    model: &Denoiser,
    batch: &TeacherBatch,
    process: &DiffusionProcess,
    weighting: Weighting,
) -> Result<Var> {
    let k = process.vocab();
    let logits = model.forward(g, &batch.z_t, &batch.t)?;
    let logp = g.log_softmax(logits)?;
    let w = row_weights(process, &batch.z_t, &batch.t, weighting);
    let mut coef = vec![0.0; w.len() * k];
    for (r, (&wr, &x)) in w.iter().zip(batch.x.tokens()).enumerate() {
        coef[r * k + x as usize] = -wr;
    }
    g.dot_const(logp, Tensor::new(vec![w.len(), k], coef)?)
}

/// Mean weighted cross-entropy of `model` on a freshly diffused batch.
pub fn teacher_loss(
    model: &Denoiser,
    x: &TokenBatch,
    process: &DiffusionProcess,
    rng: &mut RngState,
    weighting: Weighting,
) -> Result<f64> {
    let batch = TeacherBatch::draw(x.clone(), process, rng)?;
    let mut g = Graph::new();
    let loss = teacher_loss_graph(&mut g, model, &batch, process, weighting)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weighting: Weighting,
    /// Evaluate the exact-chain KL every this many steps (0 disables).
    pub eval_every: usize,
    /// Sampler steps used for the periodic KL.
    pub eval_sampler_steps: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            adam: AdamConfig::default(),
            weighting: Weighting::Constant,
            eval_every: 500,
            eval_sampler_steps: 16,
        }
    }
}

/// One row of the teacher training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogRow {
    pub step: usize,
    pub loss: f64,
    pub eval_kl: Option<f64>,
    pub wallclock_ms: u128,
}

/// Adam on [`teacher_loss`]; aborts on a non-finite loss.
pub fn train_teacher(
    model: &mut Denoiser,
    dataset: &SyntheticDataset,
    process: &DiffusionProcess,
    cfg: &TeacherConfig,
    rng: &mut RngState,
) -> Result<Vec<TeacherLogRow>> {
    if !model.config().matches(process) || model.config().seq_len != dataset.positions() {
        return Err(Error::InvalidArgument(
            "model does not match the dataset and process".into(),
        ));
    }
    let exact = dataset.exact().ok();
    let start = Instant::now();
    let mut adam = AdamState::new(model.params().len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = TeacherBatch::draw(dataset.sample(cfg.batch_size, rng), process, rng)?;
        let mut g = Graph::new();
        let loss = teacher_loss_graph(&mut g, model, &batch, process, cfg.weighting)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("teacher loss {value} at step {step}")));
        }
        model.params_mut().zero_grads();
        g.backward(loss, &mut [model.params_mut()])?;
        adam_step(model.params_mut(), &cfg.adam, &mut adam)?;
        let last = step + 1 == cfg.steps;
        let eval_kl = match &exact {
            Some(q) if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last) => {
                let p = exact_chain_distribution(
                    &DenoiserPredictor::new(model),
                    process,
                    dataset.positions(),
                    cfg.eval_sampler_steps,
                )?;
                Some(kl(q, &p)?)
            }
            _ => None,
        };
        log.push(TeacherLogRow {
            step,
            loss: value,
            eval_kl,
            wallclock_ms: start.elapsed().as_millis(),
        });
    }
    Ok(log)
}

/// Gradient of the teacher loss for a fixed batch, accumulated into
/// `params` (laid out for `model`'s config).
pub fn teacher_loss_with_grad(
    model_template: &Denoiser,
    params: &mut ParamStore,
    batch: &TeacherBatch,
    process: &DiffusionProcess,
    weighting: Weighting,
) -> Result<f64> {
    let model = Denoiser::from_parts(model_template.config().clone(), std::mem::take(params))?;
    let mut g = Graph::new();
    let loss = teacher_loss_graph(&mut g, &model, batch, process, weighting);
    let mut model = model;
    let out = loss.and_then(|loss| {
        g.backward(loss, &mut [model.params_mut()])?;
        Ok(g.value(loss).item())
    });
    *params = model.into_params();
    out
}
