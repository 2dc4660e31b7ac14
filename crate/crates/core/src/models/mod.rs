//! Factorized denoisers, noise-conditioned generators, and checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use network::time_features;

use crate::autodiff::{Graph, ParamBlock, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

fn expected_layout(cfg: &ModelConfig) -> Result<Vec<ParamBlock>> {
    Ok(network::init_params(cfg, &mut RngState::new(0))?.blocks().to_vec())
}

fn check_layout(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    if expected_layout(cfg)? != params.blocks() {
        return Err(Error::Shape("parameter layout does not match the model config".into()));
    }
    Ok(())
}

/// `x̂(z_t, t)`: per-position logits over the data vocabulary. MASK is an
/// input-only token and never appears in the output head.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    params: ParamStore,
}

impl Denoiser {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        if config.n_noise != 0 {
            return Err(Error::InvalidArgument("a denoiser has no noise input".into()));
        }
        let params = network::init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        if config.n_noise != 0 {
            return Err(Error::InvalidArgument("a denoiser has no noise input".into()));
        }
        check_layout(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn forward(&self, g: &mut Graph, z: &TokenBatch, t: &[f64]) -> Result<Var> {
        network::forward(g, &self.config, &self.params, z, t, None)
    }

    /// Logits `[B*D, K]` without keeping the tape.
    pub fn logits(&self, z: &TokenBatch, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, z, t)?;
        Ok(g.value(v).clone())
    }

    pub fn probs(&self, z: &TokenBatch, t: &[f64]) -> Result<Tensor> {
        crate::numerics::softmax_last(&self.logits(z, t)?)
    }
}

/// `x̂_η(z_t, t, ε)`: a denoiser backbone plus a learned projection of an
/// `n_noise`-dimensional standard Gaussian added to the first hidden
/// residual.
#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        let params = network::init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        check_layout(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn noise_dim(&self) -> usize {
        self.config.n_noise
    }

    /// Standard normal noise of shape `[batch, n_noise]`.
    pub fn sample_noise(&self, batch: usize, rng: &mut RngState) -> Tensor {
        let n = self.config.n_noise;
        let data = (0..batch * n).map(|_| rng.normal()).collect();
        Tensor::new(vec![batch, n], data).expect("sized")
    }

    pub fn forward(&self, g: &mut Graph, z: &TokenBatch, t: &[f64], noise: &Tensor) -> Result<Var> {
        if self.config.n_noise == 0 && !noise.is_empty() {
            return Err(Error::Shape("noise given to a generator with n_noise = 0".into()));
        }
        let noise = (self.config.n_noise > 0).then_some(noise);
        network::forward(g, &self.config, &self.params, z, t, noise)
    }

    pub fn logits(&self, z: &TokenBatch, t: &[f64], noise: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, z, t, noise)?;
        Ok(g.value(v).clone())
    }

    pub fn probs(&self, z: &TokenBatch, t: &[f64], noise: &Tensor) -> Result<Tensor> {
        crate::numerics::softmax_last(&self.logits(z, t, noise)?)
    }
}

/// Warm start for distillation: the generator copies the teacher and gains
/// a zero-initialized noise projection; the auxiliary model is a plain
/// copy of the teacher.
pub fn init_from_teacher(teacher: &Denoiser, n_noise: usize) -> Result<(Generator, Denoiser)> {
    let tc = teacher.config();
    check_layout(tc, teacher.params())?;
    let gen_config = ModelConfig { n_noise, ..tc.clone() };
    let mut gen_params =
        ParamStore::from_parts(teacher.params().blocks().to_vec(), teacher.params().values().to_vec())?;
    if n_noise > 0 {
        network::add_noise_block(&mut gen_params, &gen_config)?;
    }
    let generator = Generator::from_parts(gen_config, gen_params)?;
    let aux = Denoiser::from_parts(tc.clone(), teacher.params().clone())?;
    Ok((generator, aux))
}
