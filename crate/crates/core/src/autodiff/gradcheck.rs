use super::params::ParamStore;
use crate::error::Result;
use crate::rng::RngState;

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Denominator floor for the relative error; coordinates whose
    /// gradients are both below it are compared absolutely.
    pub floor: f64,
    /// Check a random subset of this many coordinates when the store is
    /// larger.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            floor: 1e-6,
            max_coordinates: None,
            seed: 0,
        }
    }
}

/// Compare the gradient written by `f` into `params.grads` with fourth-order
/// central differences of the value `f` returns.
///
/// `f` must be deterministic given the parameter values and must
/// accumulate its gradient into the store it is handed (grads are zeroed
/// before each call).
pub fn finite_diff_check<F>(params: &ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    work.zero_grads();
    f(&mut work)?;
    let analytic = work.grads().to_vec();

    let n = params.len();
    let coords: Vec<usize> = match opts.max_coordinates {
        Some(m) if m < n => {
            let mut rng = RngState::new(opts.seed);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        coordinates_checked: coords.len(),
    };
    for &i in &coords {
        let orig = params.values()[i];
        let mut eval = |offset: f64| -> Result<f64> {
            work.values_mut()[i] = orig + offset;
            work.zero_grads();
            f(&mut work)
        };
        let h = opts.epsilon;
        let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
        work.values_mut()[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(opts.floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_block("v", vec![4], vec![0.3, -1.7, 2.2, 0.05]).unwrap();
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let report = finite_diff_check(
            &store(),
            |s| {
                let mut g = Graph::new();
                let v = g.param(s, "v")?;
                let sq = g.mul(v, v)?;
                let loss = g.sum(sq);
                let value = g.value(loss).item();
                g.backward(loss, &mut [s])?;
                Ok(value)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let report = finite_diff_check(&store(), |_| Ok(4.2), &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let report = finite_diff_check(
            &store(),
            |s| {
                let v: f64 = s.values().iter().map(|x| x * x).sum();
                for (g, x) in s.grads_mut().iter_mut().zip(store().values()) {
                    *g = 3.0 * x;
                }
                Ok(v)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn random_subset_is_respected() {
        let opts = GradCheckOptions {
            max_coordinates: Some(2),
            ..Default::default()
        };
        let report = finite_diff_check(&store(), |_| Ok(0.0), &opts).unwrap();
        assert_eq!(report.coordinates_checked, 2);
    }
}
