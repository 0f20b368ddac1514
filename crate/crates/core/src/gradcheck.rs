//! Central finite-difference gradient checking.

/// Outcome of [`check_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all coordinates.
    pub max_rel_err: f64,
    /// Coordinate where it occurred.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Compares `analytic` with central differences of `f` at `x`.
///
/// The relative error of coordinate `i` is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps coordinates with near-zero gradient from dividing by
/// rounding noise.
pub fn check_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64, floor: f64) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the input");
    let numeric = numeric_gradient(f, x, eps);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > out.max_rel_err || err.is_nan() {
            out = GradCheck {
                max_rel_err: if err.is_nan() { f64::INFINITY } else { err },
                worst: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    out
}
