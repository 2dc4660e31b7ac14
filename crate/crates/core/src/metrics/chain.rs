use super::exact::{check_enumerable, index_of, sequence_of, ExactDistribution};
use crate::diffusion::{probs_from_logits, DiffusionProcess};
use crate::distill::surgery::LogitMods;
use crate::error::{Error, Result};
use crate::models::{Denoiser, Generator};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

/// Upper bound on `(state vocabulary)^D` for chain enumeration.
pub const MAX_CHAIN_STATES: usize = 20_000;

/// Default number of fixed noise draws used to marginalize a generator.
pub const DEFAULT_NOISE_DRAWS: usize = 64;

/// A deterministic clean-data predictor for the exact chain.
///
/// `predict` returns one or more equally weighted components, each of
/// shape `[B*D, K]`. Within a component positions are sampled
/// independently; across components the transitions are averaged, which
/// is how a noise-conditioned generator expresses correlation.
pub trait ChainPredictor {
    fn predict(&self, z: &TokenBatch, t: f64) -> Result<Vec<Tensor>>;
}

pub struct DenoiserPredictor<'a> {
    pub model: &'a Denoiser,
    pub mods: LogitMods,
}

impl<'a> DenoiserPredictor<'a> {
    pub fn new(model: &'a Denoiser) -> Self {
        Self {
            model,
            mods: LogitMods::default(),
        }
    }
}

impl ChainPredictor for DenoiserPredictor<'_> {
    fn predict(&self, z: &TokenBatch, t: f64) -> Result<Vec<Tensor>> {
        let logits = self.model.logits(z, &vec![t; z.batch()])?;
        Ok(vec![probs_from_logits(&logits, &self.mods)?])
    }
}

/// A generator marginalized over a fixed, seeded set of noise draws.
pub struct GeneratorPredictor<'a> {
    generator: &'a Generator,
    draws: Vec<Vec<f64>>,
}

impl<'a> GeneratorPredictor<'a> {
    pub fn new(generator: &'a Generator, n_draws: usize, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        let draws = if generator.noise_dim() == 0 {
            vec![Vec::new()]
        } else {
            (0..n_draws.max(1))
                .map(|_| generator.sample_noise(1, &mut rng).into_data())
                .collect()
        };
        Self { generator, draws }
    }

    pub fn draws(&self) -> usize {
        self.draws.len()
    }
}

impl ChainPredictor for GeneratorPredictor<'_> {
    fn predict(&self, z: &TokenBatch, t: f64) -> Result<Vec<Tensor>> {
        let b = z.batch();
        let n = self.generator.noise_dim();
        let times = vec![t; b];
        self.draws
            .iter()
            .map(|eps| {
                let noise = Tensor::new(vec![b, n], eps.iter().copied().cycle().take(b * n).collect())?;
                self.generator.probs(z, &times, &noise)
            })
            .collect()
    }
}

/// The exact factorized posterior mean `E_q[x_d | z_t]`, by enumeration.
pub struct OraclePredictor<'a> {
    pub q: &'a ExactDistribution,
    pub process: &'a DiffusionProcess,
}

impl ChainPredictor for OraclePredictor<'_> {
    fn predict(&self, z: &TokenBatch, t: f64) -> Result<Vec<Tensor>> {
        Ok(vec![oracle_denoiser(self.q, self.process, z, t)?])
    }
}

/// Rows `[B*D, K]` of `E_q[x_d | z_t]`. States no data sequence can reach
/// get the data marginal.
pub fn oracle_denoiser(q: &ExactDistribution, process: &DiffusionProcess, z: &TokenBatch, t: f64) -> Result<Tensor> {
    let (k, d) = (q.vocab(), q.positions());
    if process.vocab() != k || z.positions() != d {
        return Err(Error::Shape("oracle shape does not match the process".into()));
    }
    z.validate(process.state_vocab())?;
    let alpha = process.alpha(t);
    let pi = process.pi();
    let mut out = Vec::with_capacity(z.batch() * d * k);
    for seq_z in z.sequences() {
        let mut acc = vec![0.0; d * k];
        let mut total = 0.0;
        for (i, &p) in q.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let x = q.sequence(i);
            let like: f64 = x
                .iter()
                .zip(seq_z)
                .map(|(&xd, &zd)| if xd == zd { alpha } else { 0.0 } + (1.0 - alpha) * pi[zd as usize])
                .product();
            let w = p * like;
            if w == 0.0 {
                continue;
            }
            total += w;
            for (pos, &xd) in x.iter().enumerate() {
                acc[pos * k + xd as usize] += w;
            }
        }
        if total > 0.0 {
            out.extend(acc.iter().map(|v| v / total));
        } else {
            for pos in 0..d {
                out.extend(q.marginal(pos));
            }
        }
    }
    Tensor::new(vec![z.batch() * d, k], out)
}

/// Exact distribution of the `k`-step reverse chain on the uniform grid
/// `t_i = 1 - i/k`, computed by dynamic programming over all states.
pub fn exact_chain_distribution(
    predictor: &dyn ChainPredictor,
    process: &DiffusionProcess,
    positions: usize,
    k: usize,
) -> Result<ExactDistribution> {
    if k == 0 {
        return Err(Error::InvalidArgument("chain needs at least one step".into()));
    }
    let kv = process.vocab();
    check_enumerable(kv, positions)?;
    let sv = process.state_vocab();
    let n_states = sv
        .checked_pow(positions as u32)
        .filter(|&n| n <= MAX_CHAIN_STATES)
        .ok_or(Error::StateSpace {
            states: sv.saturating_pow(positions as u32),
            limit: MAX_CHAIN_STATES,
        })?;

    let mut mass = vec![0.0; n_states];
    for (i, m) in mass.iter_mut().enumerate() {
        *m = sequence_of(sv, positions, i)
            .iter()
            .map(|&z| process.pi()[z as usize])
            .product();
    }

    for step in 0..k {
        let t = 1.0 - step as f64 / k as f64;
        let s = if step + 1 == k {
            0.0
        } else {
            1.0 - (step + 1) as f64 / k as f64
        };
        let live: Vec<usize> = (0..n_states).filter(|&i| mass[i] > 0.0).collect();
        let mut tokens = Vec::with_capacity(live.len() * positions);
        for &i in &live {
            tokens.extend(sequence_of(sv, positions, i));
        }
        let batch = TokenBatch::new(live.len(), positions, tokens)?;
        let comps = predictor.predict(&batch, t)?;
        if comps.is_empty() {
            return Err(Error::InvalidArgument("predictor returned no components".into()));
        }
        let weight = 1.0 / comps.len() as f64;
        let mut next = vec![0.0; n_states];
        let mut joint = vec![0.0; n_states];
        for (li, &state) in live.iter().enumerate() {
            let z = batch.sequence(li);
            for comp in &comps {
                if comp.shape() != [live.len() * positions, kv] {
                    return Err(Error::Shape(format!("predictor returned {:?}", comp.shape())));
                }
                // Outer product of the per-position transitions, built one
                // position at a time in the same base-`sv` order as the states.
                joint[0] = 1.0;
                let mut len = 1;
                for (pos, &zd) in z.iter().enumerate() {
                    let row = process.marginal_transition(comp.row(li * positions + pos), zd, s, t)?;
                    for j in (0..len).rev() {
                        let base = joint[j];
                        for (c, &r) in row.iter().enumerate() {
                            joint[j * sv + c] = base * r;
                        }
                    }
                    len *= sv;
                }
                let m = mass[state] * weight;
                for (n, &j) in next.iter_mut().zip(&joint[..len]) {
                    *n += m * j;
                }
            }
        }
        mass = next;
    }

    let mut probs = vec![0.0; kv.pow(positions as u32)];
    for (i, &m) in mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let seq = sequence_of(sv, positions, i);
        if seq.iter().any(|&x| x as usize >= kv) {
            return Err(Error::InvalidArgument("chain ended with unresolved positions".into()));
        }
        probs[index_of(kv, &seq)] += m;
    }
    ExactDistribution::new(kv, positions, probs)
}

/// The chain driven by the exact factorized oracle of `q`.
pub fn factorized_oracle_chain(
    q: &ExactDistribution,
    process: &DiffusionProcess,
    k: usize,
) -> Result<ExactDistribution> {
    let oracle = OraclePredictor { q, process };
    exact_chain_distribution(&oracle, process, q.positions(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticDataset;
    use crate::metrics::kl;

    struct Constant(Vec<f64>);

    impl ChainPredictor for Constant {
        fn predict(&self, z: &TokenBatch, _t: f64) -> Result<Vec<Tensor>> {
            let rows = z.batch() * z.positions();
            let data = (0..rows).flat_map(|_| self.0.clone()).collect();
            Ok(vec![Tensor::new(vec![rows, self.0.len()], data)?])
        }
    }

    #[test]
    fn uniform_predictor_single_position() {
        let p = DiffusionProcess::masked(3);
        for k in [1, 2, 5] {
            let out = exact_chain_distribution(&Constant(vec![1.0 / 3.0; 3]), &p, 1, k).unwrap();
            for &v in out.probs() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_mass_predictor_gives_zeros() {
        for p in [DiffusionProcess::masked(2), DiffusionProcess::uniform(2)] {
            let out = exact_chain_distribution(&Constant(vec![1.0, 0.0]), &p, 2, 4).unwrap();
            assert!((out.prob(&[0, 0]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_single_step_is_product_of_marginals() {
        let q = SyntheticDataset::correlated_bits(2, 2).unwrap().exact().unwrap();
        for p in [DiffusionProcess::masked(2), DiffusionProcess::uniform(2)] {
            let out = factorized_oracle_chain(&q, &p, 1).unwrap();
            for &v in out.probs() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_kl_decreases_with_steps() {
        // Under the linear schedule each position unmasks at a uniform step;
        // the bits can only disagree when both unmask together, so the
        // chain puts mass 1/(2k) on the disagreeing pairs.
        let q = SyntheticDataset::correlated_bits(2, 2).unwrap().exact().unwrap();
        let p = DiffusionProcess::masked(2);
        for k in [1usize, 2, 4, 64] {
            let v = kl(&q, &factorized_oracle_chain(&q, &p, k).unwrap()).unwrap();
            let expected = -(1.0 - 1.0 / (2.0 * k as f64)).ln();
            assert!((v - expected).abs() < 1e-9, "k={k}: {v} vs {expected}");
        }
    }

    #[test]
    fn chain_sums_to_one() {
        let q = SyntheticDataset::correlated_bits(3, 3).unwrap().exact().unwrap();
        for p in [DiffusionProcess::masked(3), DiffusionProcess::uniform(3)] {
            for k in [1, 3, 8] {
                let out = factorized_oracle_chain(&q, &p, k).unwrap();
                assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn state_guard() {
        let p = DiffusionProcess::masked(4);
        assert!(exact_chain_distribution(&Constant(vec![0.25; 4]), &p, 5, 1).is_err());
    }
}
