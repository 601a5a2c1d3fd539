//! Independent verification oracles shipped with the library so the CLI
//! `verify` subcommand can exercise them against user-supplied systems:
//! finite-difference gradients, the closed-form constant-field minimizer,
//! and the Heisenberg reference energy with its arc-family cross-check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gradient::{cost, CostParams};
use crate::system::{ControlSystem, EndpointCost};
use crate::trajectory::{integrate_state, Control};

/// Central finite differences of the cost with respect to every grid value,
/// rescaled by `N` to the `L^2` gradient convention.
pub fn fd_gradient(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
    eps: f64,
) -> Result<Control> {
    assert!(eps > 0.0, "fd step must be positive");
    let n_cells = u.grid_size();
    let k = u.dim();
    let mut grad = DMatrix::zeros(n_cells, k);
    for j in 0..n_cells {
        for i in 0..k {
            let mut up = u.clone();
            let mut um = u.clone();
            up.values_mut()[(j, i)] += eps;
            um.values_mut()[(j, i)] -= eps;
            let fp = cost(sys, cost_fn, params, &up)?;
            let fm = cost(sys, cost_fn, params, &um)?;
            grad[(j, i)] = n_cells as f64 * (fp - fm) / (2.0 * eps);
        }
    }
    Ok(Control::from_matrix(grad))
}

/// Closed-form minimizer for constant fields `F = B` and quadratic cost:
/// the stationarity condition `u = -beta B^T (x0 + B u - x1)` is linear, so
/// `u* = -beta (I + beta B^T B)^{-1} B^T (x0 - x1)`, constant in `s`.
///
/// Returns the constant control on the requested grid and its energy.
pub fn linear_closed_form(
    b: &DMatrix<f64>,
    x0: &DVector<f64>,
    x1: &DVector<f64>,
    beta: f64,
    grid_size: usize,
) -> Result<(Control, f64)> {
    let k = b.ncols();
    let lhs = DMatrix::identity(k, k) + beta * b.tr_mul(b);
    let rhs = -beta * b.tr_mul(&(x0 - x1));
    let u_star = lhs
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| lhs.lu().solve(&rhs))
        .ok_or(Error::SingularSolve)?;
    let x_final = x0 + b * &u_star;
    let energy = 0.5 * u_star.norm_squared() + beta * 0.5 * (x_final - x1).norm_squared();
    Ok((Control::constant(grid_size, &u_star), energy))
}

/// Minimal penalized-free energy `1/2 ||u||^2` needed to reach `(0, 0, z1)`
/// from the origin on the Heisenberg group: `2 pi |z1|`.
pub fn heisenberg_reference(z1: f64) -> f64 {
    assert!(z1 != 0.0, "reference point must be off the plane");
    2.0 * std::f64::consts::PI * z1.abs()
}

/// Cross-validation of [`heisenberg_reference`] by dense search over the
/// one-parameter family of single-loop constant-speed circular-arc controls
/// `u_c(s) = c (cos 2 pi s, sin 2 pi s)`: the member reaching `(0,0,z1)` is
/// located by bisection on the numerically integrated vertical coordinate,
/// and its energy `c^2 / 2` is returned.
pub fn heisenberg_arc_search(z1: f64, grid_size: usize) -> Result<f64> {
    assert!(z1 != 0.0, "reference point must be off the plane");
    let sys = crate::system::make_heisenberg();
    let x0 = DVector::zeros(3);
    let orientation = z1.signum();
    let z_of = |c: f64| -> Result<f64> {
        let u = Control::from_fn(grid_size, 2, |j, i| {
            let s = (j as f64 + 0.5) / grid_size as f64;
            let phase = 2.0 * std::f64::consts::PI * s;
            c * if i == 0 { phase.cos() } else { orientation * phase.sin() }
        });
        let traj = integrate_state(&sys, &x0, &u)?;
        Ok(traj.final_state()[2] * orientation)
    };

    // z(c) = c^2 / (4 pi) is increasing in c > 0; bracket and bisect.
    let target = z1.abs();
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while z_of(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NoConvergence {
                iterations: 0,
                residual: target,
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if z_of(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    Ok(0.5 * c * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::stationarity_residual;
    use crate::gradient::GradientMode;
    use crate::system::{make_linear, make_quadratic_cost};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_closed_form() {
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (u, energy) = linear_closed_form(
            &b,
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![0.0]),
            1.0,
            16,
        )
        .unwrap();
        assert_relative_eq!(u.values()[(0, 0)], -0.5, epsilon = 1e-14);
        assert_relative_eq!(energy, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_zero_displacement() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let x = DVector::from_vec(vec![0.4, -0.6]);
        let (u, energy) = linear_closed_form(&b, &x, &x, 25.0, 8).unwrap();
        assert_eq!(u.l2_norm(), 0.0);
        assert_eq!(energy, 0.0);
    }

    #[test]
    fn closed_form_pseudoinverse_limit() {
        // Well-conditioned B so the O(1/beta) gap clears the tolerance.
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let x1 = DVector::zeros(2);
        let (u, _) = linear_closed_form(&b, &x0, &x1, 1e6, 4).unwrap();
        // Full-rank B: the limit is -B^{-1}(x0 - x1).
        let expected = -(b.lu().solve(&(x0 - x1)).unwrap());
        for i in 0..2 {
            assert!((u.values()[(0, i)] - expected[i]).abs() <= 1e-5);
        }
    }

    #[test]
    fn closed_form_is_stationary_for_flow() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 1.5]);
        let x0 = DVector::from_vec(vec![0.8, -0.2]);
        let x1 = DVector::from_vec(vec![0.1, 0.3]);
        let beta = 3.0;
        let (u_star, _) = linear_closed_form(&b, &x0, &x1, beta, 32).unwrap();
        let sys = make_linear(&b);
        let cost_fn = make_quadratic_cost(x1);
        let params = CostParams::new(beta, x0);
        let res = stationarity_residual(
            &sys,
            &cost_fn,
            &params,
            &u_star,
            GradientMode::DiscreteAdjoint,
        )
        .unwrap();
        assert!(res <= 1e-10, "residual {res:.3e}");
    }

    #[test]
    fn fd_gradient_beta_zero_returns_control() {
        let sys = make_linear(&DMatrix::from_row_slice(1, 1, &[1.0]));
        let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.0]));
        let params = CostParams::new(0.0, DVector::from_vec(vec![1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Control::from_fn(8, 1, |_, _| rng.gen_range(-1.0..1.0));
        let fd = fd_gradient(&sys, &cost_fn, &params, &u, 1e-5).unwrap();
        for j in 0..8 {
            assert_relative_eq!(fd.values()[(j, 0)], u.values()[(j, 0)], epsilon = 1e-8);
        }
    }

    #[test]
    fn fd_gradient_second_order_in_step() {
        // A state-dependent Jacobian keeps the per-component third
        // derivative of the cost above the roundoff floor of the central
        // difference, so the O(eps^2) truncation law is measurable.
        use crate::system::{ControlSystem, Monomial, Polynomial};
        let f1 = vec![Polynomial::constant_term(1.0, 2), Polynomial::default()];
        let f2 = vec![
            Polynomial::default(),
            Polynomial {
                terms: vec![Monomial {
                    coef: 1.0,
                    powers: vec![2, 0],
                }],
            },
        ];
        let sys = ControlSystem::from_polynomials(2, 2, vec![f1, f2]).unwrap();
        let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.2, 0.4]));
        let params = CostParams::new(20.0, DVector::from_vec(vec![0.3, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = Control::from_fn(12, 2, |_, _| rng.gen_range(-1.0..1.0));
        let exact = crate::gradient::gradient_discrete(&sys, &cost_fn, &params, &u)
            .unwrap()
            .g_full;
        let err = |eps: f64| {
            fd_gradient(&sys, &cost_fn, &params, &u, eps)
                .unwrap()
                .axpy(-1.0, &exact)
                .l2_norm()
        };
        let e1 = err(1e-2);
        let e2 = err(5e-3);
        assert!(e2 <= 0.3 * e1, "O(eps^2) self-consistency: {e1:.3e} -> {e2:.3e}");
    }

    #[test]
    fn heisenberg_reference_values() {
        assert_relative_eq!(heisenberg_reference(0.1), 0.6283185307179586, epsilon = 1e-12);
        assert_eq!(heisenberg_reference(-0.1), heisenberg_reference(0.1));
        assert_relative_eq!(heisenberg_reference(1.0), 2.0 * std::f64::consts::PI);
    }

    #[test]
    fn arc_search_agrees_with_reference() {
        // The sampled circle approximates the continuum loop at O(N^-2);
        // 4096 cells put the agreement well inside 1e-6.
        for z in [0.1, -0.1, 1.0] {
            let searched = heisenberg_arc_search(z, 4096).unwrap();
            let reference = heisenberg_reference(z);
            assert!(
                (searched - reference).abs() <= 1e-6 * reference,
                "z {z}: search {searched:.9} vs {reference:.9}"
            );
        }
    }
}
