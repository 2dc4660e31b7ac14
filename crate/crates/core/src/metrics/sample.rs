use crate::diffusion::DiffusionProcess;
use crate::error::{Error, Result};
use crate::models::{Denoiser, Generator};
use crate::numerics::entropy;
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

/// Sample count below which [`sample_entropy`] logs a warning.
pub const MIN_ENTROPY_SAMPLES: usize = 1000;

/// Empirical unigram token entropy in nats.
pub fn sample_entropy(samples: &TokenBatch, vocab: usize) -> Result<f64> {
    samples.validate(vocab)?;
    if samples.batch() < MIN_ENTROPY_SAMPLES {
        log::warn!("sample entropy from only {} samples", samples.batch());
    }
    let mut counts = vec![0.0; vocab];
    for &t in samples.tokens() {
        counts[t as usize] += 1.0;
    }
    let n: f64 = counts.iter().sum();
    if n == 0.0 {
        return Err(Error::InvalidArgument("no tokens".into()));
    }
    Ok(entropy(&counts.iter().map(|c| c / n).collect::<Vec<_>>()))
}

fn mean_row_entropy(probs: &Tensor) -> f64 {
    (0..probs.rows()).map(|r| entropy(probs.row(r))).sum::<f64>() / probs.rows() as f64
}

/// Mean per-position entropy of `x̂_η` at `t = 1` over `n_probes` fully
/// noised inputs, each with its own noise draw.
pub fn generator_output_entropy(
    generator: &Generator,
    process: &DiffusionProcess,
    n_probes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let z = process.fully_noised(n_probes, generator.config().seq_len, rng);
    let noise = generator.sample_noise(n_probes, rng);
    Ok(mean_row_entropy(&generator.probs(&z, &vec![1.0; n_probes], &noise)?))
}

/// [`generator_output_entropy`] for a plain denoiser.
pub fn denoiser_output_entropy(
    model: &Denoiser,
    process: &DiffusionProcess,
    n_probes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let z = process.fully_noised(n_probes, model.config().seq_len, rng);
    Ok(mean_row_entropy(&model.probs(&z, &vec![1.0; n_probes])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_from_teacher, ModelConfig};

    #[test]
    fn sample_entropy_examples() {
        let same = TokenBatch::filled(2000, 2, 1);
        assert_eq!(sample_entropy(&same, 4).unwrap(), 0.0);
        let mut rng = RngState::new(1);
        let tokens = (0..100_000).map(|_| rng.below(4) as u32).collect();
        let uni = TokenBatch::new(100_000, 1, tokens).unwrap();
        assert!((sample_entropy(&uni, 4).unwrap() - 4f64.ln()).abs() < 0.02);
    }

    fn zero_head(model: &mut Denoiser, bias: &[f64]) {
        let p = model.params_mut();
        let r = p.block("out_w").unwrap().range();
        p.values_mut()[r].iter_mut().for_each(|v| *v = 0.0);
        let r = p.block("out_b").unwrap().range();
        p.values_mut()[r].copy_from_slice(bias);
    }

    #[test]
    fn output_entropy_limits() {
        let process = DiffusionProcess::masked(3);
        let cfg = ModelConfig::for_process(&process, 2);
        let mut m = Denoiser::new(cfg, &mut RngState::new(0)).unwrap();
        zero_head(&mut m, &[0.0, 0.0, 0.0]);
        let (g, _) = init_from_teacher(&m, 2).unwrap();
        let h = generator_output_entropy(&g, &process, 8, &mut RngState::new(1)).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
        zero_head(&mut m, &[800.0, 0.0, 0.0]);
        let h = denoiser_output_entropy(&m, &process, 8, &mut RngState::new(1)).unwrap();
        assert!(h.abs() < 1e-12);
    }
}
