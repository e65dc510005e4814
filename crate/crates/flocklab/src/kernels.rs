//! The influence-function family: the classical bounded kernel, its
//! epsilon-regularized scaled form, the singular limit, and the closed-form
//! envelopes relating them.
//!
//! Conventions used throughout the crate:
//! * `c_lambda = 2^(1/lambda) - 1`, so the scaled kernel at `r = epsilon = 1`
//!   is exactly 1/2.
//! * the singular kernel is `c_lambda^(-lambda) r^(-2 lambda)`, a Riesz
//!   kernel of order `dim - 2 lambda` with no extra normalizing constant
//!   (cross-literature comparisons must rescale by the fractional-Laplacian
//!   constant themselves).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("singular kernel evaluated at r = 0 with epsilon = 0")]
    Singularity,
    #[error("{what} requires lambda < 1/2, got {lambda}")]
    LambdaRange { what: &'static str, lambda: f64 },
}

/// `2^(1/lambda) - 1`, the constant tying the kernel's half-height to its
/// unit range.
pub fn c_lambda(lambda: f64) -> f64 {
    debug_assert!(lambda > 0.0);
    2f64.powf(1.0 / lambda) - 1.0
}

/// `base^(-lambda)` with fast paths for the exponents that dominate the
/// pairwise loops.
#[inline(always)]
pub(crate) fn inv_pow(base: f64, lambda: f64) -> f64 {
    if lambda == 0.25 {
        1.0 / base.sqrt().sqrt()
    } else if lambda == 0.5 {
        1.0 / base.sqrt()
    } else if lambda == 1.0 {
        base.recip()
    } else {
        base.powf(-lambda)
    }
}

/// Exponent/regularization pair for the scaled kernel family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub dim: usize,
}

impl KernelParams {
    pub fn new(lambda: f64, epsilon: f64, dim: usize) -> Result<Self, KernelError> {
        if dim == 0 {
            return Err(KernelError::InvalidParams("dim must be >= 1".into()));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(KernelError::InvalidParams(format!("lambda must be positive, got {lambda}")));
        }
        if lambda >= dim as f64 / 2.0 {
            return Err(KernelError::InvalidParams(format!(
                "lambda must lie in (0, dim/2) = (0, {}), got {lambda}",
                dim as f64 / 2.0
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(KernelError::InvalidParams(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(KernelParams { lambda, epsilon, dim })
    }

    /// Derived constant, recomputed on demand rather than stored.
    pub fn c_lambda(&self) -> f64 {
        c_lambda(self.lambda)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        KernelParams { epsilon, ..*self }
    }

    /// Scaled kernel on a squared distance, the form the pairwise loops use
    /// (no square root needed).
    #[inline(always)]
    pub fn phi_of_r2(&self, r2: f64) -> f64 {
        inv_pow(self.epsilon * self.epsilon + self.c_lambda() * r2, self.lambda)
    }
}

/// Dimensional kernel: strength `K` at contact, decaying past range `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionalKernelParams {
    pub lambda: f64,
    pub strength: f64,
    pub range: f64,
}

impl DimensionalKernelParams {
    pub fn new(lambda: f64, strength: f64, range: f64) -> Result<Self, KernelError> {
        if !(lambda > 0.0) {
            return Err(KernelError::InvalidParams(format!("lambda must be positive, got {lambda}")));
        }
        if !(strength > 0.0) {
            return Err(KernelError::InvalidParams(format!("strength must be positive, got {strength}")));
        }
        if !(range > 0.0) {
            return Err(KernelError::InvalidParams(format!("range must be positive, got {range}")));
        }
        Ok(DimensionalKernelParams { lambda, strength, range })
    }
}

/// Classical influence function `(1 + r^2)^(-lambda)`: bounded, strictly
/// decreasing, value 1 at contact.
pub fn influence_classical(r: f64, lambda: f64) -> f64 {
    debug_assert!(r >= 0.0 && lambda > 0.0);
    inv_pow(1.0 + r * r, lambda)
}

/// Scaled influence function `(eps^2 + c_lambda r^2)^(-lambda)`; at
/// `epsilon = 0` this is the singular kernel `c^(-lambda) r^(-2 lambda)`.
pub fn influence_scaled(r: f64, params: &KernelParams) -> Result<f64, KernelError> {
    if params.epsilon == 0.0 && r == 0.0 {
        return Err(KernelError::Singularity);
    }
    Ok(params.phi_of_r2(r * r))
}

/// Singular limit kernel `c_lambda^(-lambda) r^(-2 lambda)`.
pub fn influence_singular(r: f64, lambda: f64) -> Result<f64, KernelError> {
    if r == 0.0 {
        return Err(KernelError::Singularity);
    }
    Ok(inv_pow(c_lambda(lambda), lambda) * inv_pow(r * r, lambda))
}

/// Dimensional kernel `K sigma^(2 lambda) / (sigma^2 + c_lambda r^2)^lambda`:
/// equals `K` at `r = 0` and exactly `K/2` at `r = sigma`.
pub fn influence_dimensional(r: f64, params: &DimensionalKernelParams) -> f64 {
    debug_assert!(r >= 0.0);
    let c = c_lambda(params.lambda);
    let s2 = params.range * params.range;
    params.strength * s2.powf(params.lambda) * inv_pow(s2 + c * r * r, params.lambda)
}

/// `phi_0(r) - phi_eps(r)`, the regularization gap at distance `r` (the
/// scaled kernel never exceeds the singular one, so this is nonnegative).
///
/// Written as `phi_0 (1 - (1 + u)^(-lambda))` with `u = eps^2 / (c r^2)`;
/// direct subtraction loses all precision once the gap falls below the
/// roundoff of the two kernels, which happens already for moderate `r`.
pub fn kernel_gap(r: f64, params: &KernelParams) -> Result<f64, KernelError> {
    if !(r > 0.0) {
        return Err(KernelError::InvalidParams(format!("kernel_gap needs r > 0, got {r}")));
    }
    let singular = influence_singular(r, params.lambda)?;
    let u = params.epsilon * params.epsilon / (params.c_lambda() * r * r);
    Ok(singular * -(-params.lambda * u.ln_1p()).exp_m1())
}

/// Closed-form majorant of the gap: `C_lambda eps^(1-2 lambda) / r` with
/// `C_lambda = lambda / ((1 - 2 lambda) sqrt(c_lambda))`. Only valid for
/// `lambda` in (0, 1/2); larger exponents have no bound of this shape.
pub fn kernel_gap_bound(r: f64, params: &KernelParams) -> Result<f64, KernelError> {
    if params.lambda >= 0.5 {
        return Err(KernelError::LambdaRange { what: "kernel gap bound", lambda: params.lambda });
    }
    if !(r > 0.0) {
        return Err(KernelError::InvalidParams(format!("kernel_gap_bound needs r > 0, got {r}")));
    }
    let l = params.lambda;
    let c_big = l / ((1.0 - 2.0 * l) * c_lambda(l).sqrt());
    Ok(c_big * params.epsilon.powf(1.0 - 2.0 * l) / r)
}

/// Pair kernel `phi_eps(|x-y|) (test(t,x) - test(t,y))` for a vector-valued
/// test function. Continuously extended by zero on the diagonal where that
/// limit exists.
pub fn h_kernel<F>(
    test_fn: F,
    t: f64,
    x: &[f64],
    y: &[f64],
    params: &KernelParams,
) -> Result<Vec<f64>, KernelError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    debug_assert_eq!(x.len(), y.len());
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if r2 == 0.0 && params.epsilon == 0.0 {
        if params.lambda > 0.5 {
            return Err(KernelError::LambdaRange {
                what: "diagonal h_kernel value with epsilon = 0",
                lambda: params.lambda,
            });
        }
        return Ok(vec![0.0; test_fn(t, x).len()]);
    }
    let phi = params.phi_of_r2(r2);
    let fx = test_fn(t, x);
    let fy = test_fn(t, y);
    Ok(fx.iter().zip(&fy).map(|(a, b)| phi * (a - b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(lambda: f64, epsilon: f64) -> KernelParams {
        KernelParams::new(lambda, epsilon, 1).unwrap()
    }

    #[test]
    fn classical_kernel_closed_forms() {
        assert_eq!(influence_classical(0.0, 0.25), 1.0);
        assert_relative_eq!(influence_classical(1.0, 0.5), 0.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(influence_classical(3.0, 1.0), 0.1, max_relative = 1e-14);
        // 50-digit reference values
        assert_relative_eq!(
            influence_classical(1.5, 0.25),
            0.7447819789879647202219677,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            influence_classical(0.3, 0.45),
            0.9619623528743194330193417,
            max_relative = 1e-14
        );
    }

    #[test]
    fn scaled_kernel_defining_property_and_spot_values() {
        for &lambda in &[0.05, 0.1, 0.25, 0.333, 0.45, 0.49] {
            let p = params(lambda, 1.0);
            assert_relative_eq!(influence_scaled(1.0, &p).unwrap(), 0.5, max_relative = 1e-13);
        }
        assert_relative_eq!(
            influence_scaled(0.0, &params(0.25, 0.5)).unwrap(),
            2f64.sqrt(),
            max_relative = 1e-14
        );
        // lambda = 1/2 needs dim >= 2 to be admissible
        let p_half = KernelParams::new(0.5, 0.0, 2).unwrap();
        assert_relative_eq!(
            influence_scaled(1.0, &p_half).unwrap(),
            1.0 / 3f64.sqrt(),
            max_relative = 1e-14
        );
        // 50-digit reference values
        assert_relative_eq!(
            influence_scaled(0.5, &params(0.3, 0.2)).unwrap(),
            0.7779027597070535615327106,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            influence_scaled(2.0, &params(0.45, 0.05)).unwrap(),
            0.2986392524902497668674656,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            influence_scaled(0.1, &params(0.1, 0.7)).unwrap(),
            0.7888247372579866244539422,
            max_relative = 1e-13
        );
    }

    #[test]
    fn strictly_smaller_for_larger_eps_at_moderate_scales() {
        let a = influence_scaled(1.0, &params(0.25, 0.5)).unwrap();
        let b = influence_scaled(1.0, &params(0.25, 0.6)).unwrap();
        assert!(b < a);
    }

    #[test]
    fn singularity_is_an_error() {
        assert_eq!(influence_scaled(0.0, &params(0.25, 0.0)), Err(KernelError::Singularity));
        assert_eq!(influence_singular(0.0, 0.25), Err(KernelError::Singularity));
    }

    #[test]
    fn c_lambda_reference_values() {
        assert_eq!(c_lambda(0.25), 15.0);
        assert_eq!(c_lambda(0.5), 3.0);
        assert_eq!(c_lambda(1.0), 1.0);
        assert_relative_eq!(c_lambda(0.3), 9.079368399158985318137685, max_relative = 1e-14);
        assert_relative_eq!(c_lambda(0.45), 3.666116158304466323574771, max_relative = 1e-14);
    }

    #[test]
    fn dimensional_kernel_contact_and_half_height() {
        let p = DimensionalKernelParams::new(0.3, 2.0, 1.0).unwrap();
        assert_relative_eq!(influence_dimensional(0.0, &p), 2.0, max_relative = 1e-14);
        assert_relative_eq!(influence_dimensional(1.0, &p), 1.0, max_relative = 1e-13);

        let p = DimensionalKernelParams::new(0.5, 1.0, 1.0).unwrap();
        assert_relative_eq!(
            influence_dimensional(2.0, &p),
            1.0 / 13f64.sqrt(),
            max_relative = 1e-13
        );

        // 50-digit reference values at K=3, sigma=0.8, lambda=0.35
        let p = DimensionalKernelParams::new(0.35, 3.0, 0.8).unwrap();
        assert_relative_eq!(influence_dimensional(0.0, &p), 3.0, max_relative = 1e-13);
        assert_relative_eq!(influence_dimensional(0.8, &p), 1.5, max_relative = 1e-13);
        assert_relative_eq!(
            influence_dimensional(2.0, &p),
            0.8246370075856804667964191,
            max_relative = 1e-13
        );
    }

    #[test]
    fn gap_reference_value_and_bound() {
        let p = params(0.3, 0.2);
        let gap = kernel_gap(0.5, &p).unwrap();
        assert_relative_eq!(gap, 0.004087432185020243742015695, max_relative = 1e-12);
        let bound = kernel_gap_bound(0.5, &p).unwrap();
        assert_relative_eq!(bound, 0.2615022550018271388612309, max_relative = 1e-12);
        assert!(gap <= bound);

        assert_eq!(kernel_gap(1.0, &params(0.25, 0.0)).unwrap(), 0.0);
        assert!(matches!(
            kernel_gap_bound(1.0, &KernelParams::new(0.6, 0.1, 2).unwrap()),
            Err(KernelError::LambdaRange { .. })
        ));
    }

    #[test]
    fn gap_bound_spot_check_from_spec() {
        // lambda = 1/4: C = (0.25 / (0.5 sqrt(15))) and eps^(1/2) at eps = 0.1
        let p = params(0.25, 0.1);
        let bound = kernel_gap_bound(1.0, &p).unwrap();
        assert_relative_eq!(bound, 0.25 / (0.5 * 15f64.sqrt()) * 0.1f64.sqrt(), max_relative = 1e-13);
        assert!(kernel_gap(1.0, &p).unwrap() <= bound);
    }

    #[test]
    fn params_validation() {
        assert!(KernelParams::new(0.25, 1.0, 1).is_ok());
        assert!(KernelParams::new(0.5, 1.0, 1).is_err()); // not < dim/2
        assert!(KernelParams::new(0.75, 1.0, 2).is_ok());
        assert!(KernelParams::new(-0.1, 1.0, 1).is_err());
        assert!(KernelParams::new(0.25, -1.0, 1).is_err());
        assert!(DimensionalKernelParams::new(0.25, 0.0, 1.0).is_err());
    }

    #[test]
    fn h_kernel_basics() {
        let p = params(0.25, 0.5);
        // constant test function annihilates H
        let h = h_kernel(|_, _| vec![1.0, 2.0], 0.0, &[0.3], &[0.9], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        // diagonal with eps > 0
        let h = h_kernel(|_, x| vec![x[0]], 0.0, &[0.3], &[0.3], &p).unwrap();
        assert_eq!(h, vec![0.0]);
        // linear test fn, eps = 0: |H| = |x-y|^(1-2 lambda) c^(-lambda), Lip = 1
        let p0 = params(0.25, 0.0);
        let (x, y) = (0.9f64, 0.1f64);
        let h = h_kernel(|_, x| vec![x[0]], 0.0, &[x], &[y], &p0).unwrap();
        let want = (x - y).powf(0.5) / 15f64.powf(0.25);
        assert_relative_eq!(h[0].abs(), want, max_relative = 1e-13);
        // diagonal, eps = 0: zero for lambda <= 1/2, error above
        let h = h_kernel(|_, x| vec![x[0]], 0.0, &[0.3], &[0.3], &p0).unwrap();
        assert_eq!(h, vec![0.0]);
        let p_big = KernelParams::new(0.75, 0.0, 2).unwrap();
        assert!(matches!(
            h_kernel(|_, x| vec![x[0], x[1]], 0.0, &[0.3, 0.0], &[0.3, 0.0], &p_big),
            Err(KernelError::LambdaRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn envelope_bounds_hold(
            r in 1e-3f64..1e3,
            eps in 1e-3f64..1.0,
            lambda in 0.011f64..0.489,
        ) {
            let p = params(lambda, eps);
            let phi = influence_scaled(r, &p).unwrap();
            let singular = influence_singular(r, lambda).unwrap();
            let tol = 1.0 + 1e-12;
            prop_assert!(phi <= singular * tol);
            prop_assert!(phi <= eps.powf(-2.0 * lambda) * tol);
            let gap = kernel_gap(r, &p).unwrap();
            let bound = kernel_gap_bound(r, &p).unwrap();
            prop_assert!(gap <= bound * tol);
        }

        #[test]
        fn kernel_is_decreasing_in_r_and_eps(
            r in 1e-3f64..1e2,
            dr in 1e-3f64..1.0,
            eps in 1e-3f64..1.0,
            de in 1e-3f64..0.5,
            lambda in 0.011f64..0.489,
        ) {
            let p = params(lambda, eps);
            let a = influence_scaled(r, &p).unwrap();
            let b = influence_scaled(r + dr, &p).unwrap();
            prop_assert!(b < a);
            // strict decrease in eps only when the eps^2 increment is
            // resolvable against c r^2 in double precision (at small lambda
            // and large r the kernel argument is ~1e30 and a 1e-6 bump in
            // eps^2 lands below one ulp)
            let c = influence_scaled(r, &p.with_epsilon(eps + de)).unwrap();
            prop_assert!(c <= a);
            let bump = (eps + de) * (eps + de) - eps * eps;
            if bump > 1e-12 * (eps * eps + p.c_lambda() * r * r) {
                prop_assert!(c < a);
            }
            let ca = influence_classical(r, lambda);
            let cb = influence_classical(r + dr, lambda);
            prop_assert!(cb < ca);
        }

        #[test]
        fn dimensional_matches_scaled_at_unit_strength_and_range(
            r in 0.0f64..50.0,
            lambda in 0.011f64..0.489,
        ) {
            let d = DimensionalKernelParams::new(lambda, 1.0, 1.0).unwrap();
            let s = params(lambda, 1.0);
            let a = influence_dimensional(r, &d);
            let b = influence_scaled(r, &s).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }

        #[test]
        fn h_kernel_bounds_hold(
            x in -5.0f64..5.0,
            dy in 1e-6f64..5.0,
            eps in 1e-3f64..1.0,
            lambda in 0.011f64..0.489,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            // test fn (a sin(x) + b x, cos(x)): Lipschitz constant bound
            let lip = ((a.abs() + b.abs()).powi(2) + 1.0).sqrt();
            let f = move |_: f64, z: &[f64]| vec![a * z[0].sin() + b * z[0], z[0].cos()];
            let y = x + dy;
            let pe = params(lambda, eps);
            let p0 = params(lambda, 0.0);
            let he = h_kernel(f, 0.0, &[x], &[y], &pe).unwrap();
            let h0 = h_kernel(f, 0.0, &[x], &[y], &p0).unwrap();
            let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
            let tol = 1.0 + 1e-12;
            let c = c_lambda(lambda);
            prop_assert!(norm(&he) <= c.powf(-lambda) * lip * dy.powf(1.0 - 2.0 * lambda) * tol);
            prop_assert!(norm(&he) <= eps.powf(-2.0 * lambda) * lip * dy * tol);
            let diff: Vec<f64> = he.iter().zip(&h0).map(|(u, v)| u - v).collect();
            let c_big = lambda / ((1.0 - 2.0 * lambda) * c.sqrt());
            prop_assert!(norm(&diff) <= c_big * lip * eps.powf(1.0 - 2.0 * lambda) * tol);
        }
    }
}
