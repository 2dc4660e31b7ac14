//! Numerically stable categorical primitives.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len().max(1) {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn normalize_along(logits: &Tensor, axis: usize, log_space: bool) -> Result<Tensor> {
    logits.ensure_finite("softmax input")?;
    let (outer, n, inner) = axis_extents(logits.shape(), axis)?;
    let src = logits.data();
    let mut out = logits.clone();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|k| (src[idx(k)] - m).exp()).sum();
            if log_space {
                let lse = m + sum.ln();
                for k in 0..n {
                    dst[idx(k)] = src[idx(k)] - lse;
                }
            } else {
                for k in 0..n {
                    dst[idx(k)] = (src[idx(k)] - m).exp() / sum;
                }
            }
        }
    }
    Ok(out)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    normalize_along(logits, axis, false)
}

/// Log-softmax along `axis` via log-sum-exp.
pub fn log_softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    normalize_along(logits, axis, true)
}

/// Softmax along the last axis.
pub fn softmax_last(logits: &Tensor) -> Result<Tensor> {
    softmax(logits, logits.shape().len().saturating_sub(1))
}

/// Log-softmax along the last axis.
pub fn log_softmax_last(logits: &Tensor) -> Result<Tensor> {
    log_softmax(logits, logits.shape().len().saturating_sub(1))
}

/// Gumbel-argmax draw from one probability row. Zero-probability entries
/// are never selected.
pub fn sample_row(row: &[f64], rng: &mut RngState) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, &p) in row.iter().enumerate() {
        // Draw for every entry so the stream advances identically regardless
        // of which categories have zero mass.
        let g = rng.gumbel();
        if p > 0.0 {
            let score = p.ln() + g;
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
    }
    best
}

pub(crate) fn check_simplex_row(row: &[f64], tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!("probability row has invalid entry {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidArgument(format!("probability row sums to {sum}, not 1")));
    }
    Ok(())
}

/// Draw one token per row of `probs`.
///
/// `probs` has shape `[batch, ..., K]`; the returned batch has `batch` rows
/// and one position per remaining row of the input.
pub fn categorical_sample(probs: &Tensor, rng: &mut RngState) -> Result<TokenBatch> {
    let rows = probs.rows();
    let batch = if probs.shape().len() >= 2 { probs.shape()[0] } else { 1 };
    let positions = rows.checked_div(batch).unwrap_or(0);
    let mut tokens = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = probs.row(r);
        check_simplex_row(row, 1e-6)?;
        tokens.push(sample_row(row, rng) as u32);
    }
    TokenBatch::new(batch, positions, tokens)
}

/// Per-row cross-entropy `-Σ_c target_c · logprob_c`. Accepts hard
/// (one-hot) and soft targets. Returns a tensor with the leading shape of
/// the inputs (last axis dropped).
pub fn cross_entropy(target: &Tensor, predicted_logprobs: &Tensor) -> Result<Tensor> {
    if target.shape() != predicted_logprobs.shape() {
        return Err(Error::Shape(format!(
            "cross_entropy target {:?} vs prediction {:?}",
            target.shape(),
            predicted_logprobs.shape()
        )));
    }
    let mut out = Vec::with_capacity(target.rows());
    for r in 0..target.rows() {
        let ce: f64 = target
            .row(r)
            .iter()
            .zip(predicted_logprobs.row(r))
            .filter(|(&t, _)| t != 0.0)
            .map(|(&t, &lp)| -t * lp)
            .sum();
        out.push(ce);
    }
    let shape = target.shape()[..target.shape().len().saturating_sub(1)].to_vec();
    Tensor::new(shape, out)
}

/// Shannon entropy (nats) of one probability row.
pub fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Total variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_last(&t(&[0.0; 4])).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let p = softmax_last(&t(&[0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let p = softmax_last(&t(&[1000.0, 0.0])).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_last(&t(&[f64::NAN, 0.0])).is_err());
        assert!(log_softmax_last(&t(&[f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 3f64.ln(), 1.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[2] - 0.75).abs() < 1e-15);
        assert!((p.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_examples() {
        let l = log_softmax_last(&t(&[0.0, 0.0])).unwrap();
        assert!((l.data()[0] + 2f64.ln()).abs() < 1e-15);
        let l = log_softmax_last(&t(&[0.0, 3f64.ln()])).unwrap();
        assert!((l.data()[0] - 0.25f64.ln()).abs() < 1e-14);
        assert!((l.data()[1] - 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn categorical_degenerate_and_deterministic() {
        let p = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = RngState::new(0);
        for _ in 0..100 {
            let s = categorical_sample(&p, &mut rng).unwrap();
            assert_eq!(s.tokens(), &[0, 0, 2]);
        }
        let q = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let draw = |seed| {
            let mut r = RngState::new(seed);
            (0..50)
                .map(|_| categorical_sample(&q, &mut r).unwrap().tokens()[0])
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn categorical_fair_coin_frequency() {
        let n = 100_000;
        let p = Tensor::new(vec![n, 2], [0.5, 0.5].repeat(n)).unwrap();
        let s = categorical_sample(&p, &mut RngState::new(1)).unwrap();
        let zeros = s.tokens().iter().filter(|&&t| t == 0).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&zeros), "{zeros}");
    }

    #[test]
    fn categorical_rejects_bad_rows() {
        let mut rng = RngState::new(0);
        let neg = t(&[-0.1, 1.1]);
        assert!(categorical_sample(&neg, &mut rng).is_err());
        let short = t(&[0.3, 0.3]);
        assert!(categorical_sample(&short, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = t(&[0.5f64.ln(), 0.5f64.ln()]);
        let ce = cross_entropy(&t(&[1.0, 0.0]), &uniform).unwrap();
        assert!((ce.item() - 2f64.ln()).abs() < 1e-15);

        let pred = t(&[0.8f64.ln(), 0.2f64.ln()]);
        let ce = cross_entropy(&t(&[0.5, 0.5]), &pred).unwrap();
        assert!((ce.item() - 0.916_290_731_874_155).abs() < 1e-12);

        let ce = cross_entropy(&t(&[0.8, 0.2]), &pred).unwrap();
        assert!((ce.item() - entropy(&[0.8, 0.2])).abs() < 1e-15);

        assert!(cross_entropy(&t(&[1.0]), &pred).is_err());
    }

    #[test]
    fn chi_square_goodness_of_fit() {
        // Critical value of chi-square with 4 dof at significance 1e-4.
        const CRIT_4DOF: f64 = 23.51;
        let mut rng = RngState::new(77);
        let n = 100_000;
        for trial in 0..3 {
            let raw: Vec<f64> = (0..5).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let p = Tensor::new(vec![n, 5], row.repeat(n)).unwrap();
            let draws = categorical_sample(&p, &mut rng).unwrap();
            let mut counts = [0usize; 5];
            for &tok in draws.tokens() {
                counts[tok as usize] += 1;
            }
            let chi2: f64 = counts
                .iter()
                .zip(&row)
                .map(|(&o, &pr)| {
                    let e = pr * n as f64;
                    (o as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < CRIT_4DOF, "trial {trial}: chi2 = {chi2}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1000.0f64..1000.0, 1..12)) {
            let p = softmax_last(&t(&v)).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn log_softmax_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in -100.0f64..100.0,
        ) {
            let a = log_softmax_last(&t(&v)).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = log_softmax_last(&t(&shifted)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn exp_log_softmax_matches_softmax(v in proptest::collection::vec(-30.0f64..30.0, 1..10)) {
            let a = log_softmax_last(&t(&v)).unwrap().map(f64::exp);
            let b = softmax_last(&t(&v)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
