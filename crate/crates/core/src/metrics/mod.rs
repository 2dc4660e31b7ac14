//! Exact enumeration oracles and sample-based metrics.

mod chain;
pub(crate) mod exact;
mod reference;
mod sample;

pub use chain::{
    exact_chain_distribution, factorized_oracle_chain, oracle_denoiser, ChainPredictor, DenoiserPredictor,
    GeneratorPredictor, OraclePredictor, DEFAULT_NOISE_DRAWS, MAX_CHAIN_STATES,
};
pub use exact::{kl, ExactDistribution, KL_FLOOR, MAX_EXACT_POSITIONS, MAX_EXACT_VOCAB};
pub use reference::{generative_perplexity, gradient_moment, GradientMoment, ReferenceModel, UNTRAINED_GRAD_NORM};
pub use sample::{denoiser_output_entropy, generator_output_entropy, sample_entropy, MIN_ENTROPY_SAMPLES};
