use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Tensors with more elements than this are checked on a seeded random
    /// subset of this many coordinates; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Relative error with the guarded denominator `max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares an analytic gradient with central differences of `f` around `params`.
///
/// `f` is evaluated twice at `params` first; differing results mean the
/// function is not deterministic and the comparison would be meaningless.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if params.shape() != analytic.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!(
                "parameters {:?} vs analytic gradient {:?}",
                params.shape(),
                analytic.shape()
            ),
        ));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first:e} then {second:e}"
        )));
    }

    let n = params.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if n > k => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
    };
    let mut probe = params.clone();
    for &i in &coords {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + opts.eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - opts.eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite comparison at coordinate {i}: analytic {a:e}, numeric {numeric:e}"
            )));
        }
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_closed_form() {
        let theta = Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>());
        let report = finite_diff_check(f, &theta, &theta, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let zero = Tensor::zeros(&[3]);
        let report =
            finite_diff_check(|_| Ok(7.0), &theta, &zero, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0.0);
        let f = |_: &Tensor<f64>| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        let theta = Tensor::zeros(&[1]);
        let err = finite_diff_check(f, &theta, &theta, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let theta = Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap();
        let wrong = Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>());
        let report = finite_diff_check(f, &theta, &wrong, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.worst_index, Some(1));
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let theta = Tensor::<f64>::ones(&[500]);
        let f = |t: &Tensor<f64>| Ok(t.data().iter().sum::<f64>());
        let opts = GradCheckOptions::default();
        let report = finite_diff_check(f, &theta, &Tensor::ones(&[500]), &opts).unwrap();
        assert_eq!(report.coords_checked, 64);
    }
}
