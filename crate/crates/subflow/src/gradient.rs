//! End-point map, penalized cost, and the two gradient representations.
//!
//! `gradient_continuous` realizes the costate formula `h_u = F^T(x_u) lambda_u^T`
//! with per-subinterval Simpson averaging; `gradient_discrete` is the exact
//! reverse-mode derivative of the discretized cost, rescaled to the `L^2`
//! convention. The flow integrates with the discrete gradient so that energy
//! dissipation is exact; the continuous one is kept as the
//! costate-representation cross-check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::{ControlSystem, EndpointCost};
use crate::trajectory::{
    integrate_adjoint, integrate_state, rk4_step, AdjointPath, Control, Trajectory,
};

/// Penalty weight, initial state, and the optional control-ball radius used
/// by the continuation diagnostics.
#[derive(Debug, Clone)]
pub struct CostParams {
    pub beta: f64,
    pub x0: DVector<f64>,
    pub radius: Option<f64>,
}

impl CostParams {
    pub fn new(beta: f64, x0: DVector<f64>) -> Self {
        assert!(beta >= 0.0 && beta.is_finite(), "beta must be nonnegative");
        CostParams {
            beta,
            x0,
            radius: None,
        }
    }
}

/// Which differentiation path produced a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    ContinuousAdjoint,
    DiscreteAdjoint,
}

/// Gradient data at a control: `h` represents the differential of the
/// end-point cost, `g_full = u + beta * h` the full gradient field.
#[derive(Debug, Clone)]
pub struct GradientRep {
    pub h: Control,
    pub g_full: Control,
    pub mode: GradientMode,
}

/// Rows `g^j` of the end-point differential `D_u P_1`, one control-shaped
/// function per state component.
#[derive(Debug, Clone)]
pub struct EndpointRows {
    pub rows: Vec<Control>,
}

/// Terminal state `x_u(1)` of the controlled trajectory.
pub fn endpoint(sys: &ControlSystem, params: &CostParams, u: &Control) -> Result<DVector<f64>> {
    Ok(integrate_state(sys, &params.x0, u)?.final_state().clone())
}

/// Penalized energy `1/2 ||u||^2 + beta a(x_u(1))`.
pub fn cost(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
) -> Result<f64> {
    let x1 = crate::trajectory::integrate_endpoint(sys, &params.x0, u)?;
    Ok(0.5 * u.l2_norm().powi(2) + params.beta * cost_fn.value(&x1))
}

/// Simpson average of `s -> F^T(x(s)) mu(s)^T` over each subinterval, with
/// the midpoint state recomputed from the RK4 stages and the midpoint
/// covector linearly interpolated.
fn simpson_covector_average(
    sys: &ControlSystem,
    traj: &Trajectory,
    u: &Control,
    path: &AdjointPath,
) -> Control {
    let n_cells = u.grid_size();
    let k = u.dim();
    let h = 1.0 / n_cells as f64;
    let rows = u.rows();
    let mut values = DMatrix::zeros(n_cells, k);
    for j in 0..n_cells {
        let (_, stages) = rk4_step(sys, &traj.nodes[j], &rows[j], h);
        let x_mid = &stages.s[2];
        let lam_mid = 0.5 * (&path.lambda[j] + &path.lambda[j + 1]);
        let left = sys.fields_transpose_apply(&traj.nodes[j], &path.lambda[j]);
        let mid = sys.fields_transpose_apply(x_mid, &lam_mid);
        let right = sys.fields_transpose_apply(&traj.nodes[j + 1], &path.lambda[j + 1]);
        let cell = (left + 4.0 * mid + right) / 6.0;
        for i in 0..k {
            values[(j, i)] = cell[i];
        }
    }
    Control::from_matrix(values)
}

/// Gradient by the costate representation: integrate the adjoint equation
/// backward from `grad a(x_u(1))` and average `F^T lambda^T` per subinterval.
pub fn gradient_continuous(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
) -> Result<GradientRep> {
    let traj = integrate_state(sys, &params.x0, u)?;
    let terminal = cost_fn.gradient(traj.final_state());
    let path = integrate_adjoint(sys, &traj, u, &terminal)?;
    let h = simpson_covector_average(sys, &traj, u, &path);
    let g_full = u.axpy(params.beta, &h);
    Ok(GradientRep {
        h,
        g_full,
        mode: GradientMode::ContinuousAdjoint,
    })
}

/// Exact gradient of the discretized cost with respect to the grid values,
/// multiplied by `N` so the discrete inner product `(1/N) sum` represents the
/// `L^2` pairing. `h` is the end-point-cost part (independent of `beta`).
pub fn gradient_discrete(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
) -> Result<GradientRep> {
    use crate::trajectory::{rk4_cell_inplace, CellBuffers};

    let n_cells = u.grid_size();
    let n = sys.state_dim();
    let k = u.dim();
    let h_step = 1.0 / n_cells as f64;
    let values = u.values();

    // Forward sweep, caching the four stage states of every cell.
    let mut bufs = CellBuffers::new(n);
    let mut stages = vec![DVector::zeros(n); 4 * n_cells];
    let mut w_cells = vec![0.0; n_cells * k];
    let mut x = params.x0.clone();
    for j in 0..n_cells {
        let w = &mut w_cells[j * k..(j + 1) * k];
        for i in 0..k {
            w[i] = values[(j, i)];
        }
        stages[4 * j].copy_from(&x);
        rk4_cell_inplace(sys, &mut x, w, h_step, &mut bufs);
        stages[4 * j + 1].copy_from(&bufs.s2);
        stages[4 * j + 2].copy_from(&bufs.s3);
        stages[4 * j + 3].copy_from(&bufs.s4);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: j });
        }
    }

    // Reverse sweep: transpose of the discrete step map applied to the
    // end-point cost gradient, accumulating the control cotangent per cell.
    let mut xbar = cost_fn.gradient(&x);
    let mut h_values = DMatrix::zeros(n_cells, k);
    let mut a = DMatrix::zeros(n, n);
    let mut kb = [
        DVector::zeros(n),
        DVector::zeros(n),
        DVector::zeros(n),
        DVector::zeros(n),
    ];
    let mut sb = DVector::zeros(n);
    let mut wb = DVector::zeros(k);
    let kb_weights = [
        h_step / 6.0,
        h_step / 3.0,
        h_step / 3.0,
        h_step / 6.0,
    ];
    // Contribution factor of each stage cotangent onto the previous stage.
    let chain = [h_step / 2.0, h_step / 2.0, h_step];
    for j in (0..n_cells).rev() {
        let w = &w_cells[j * k..(j + 1) * k];
        for i in 0..4 {
            kb[i].copy_from(&xbar);
            kb[i] *= kb_weights[i];
        }
        wb.fill(0.0);
        for i in (0..4).rev() {
            let s = &stages[4 * j + i];
            sys.a_matrix_into(s.as_slice(), w, &mut a);
            sb.gemv_tr(1.0, &a, &kb[i], 0.0);
            sys.fields_transpose_accumulate(s.as_slice(), &kb[i], &mut wb);
            xbar += &sb;
            if i > 0 {
                kb[i - 1].axpy(chain[i - 1], &sb, 1.0);
            }
        }
        for i in 0..k {
            h_values[(j, i)] = n_cells as f64 * wb[i];
        }
    }

    let h = Control::from_matrix(h_values);
    let g_full = u.axpy(params.beta, &h);
    Ok(GradientRep {
        h,
        g_full,
        mode: GradientMode::DiscreteAdjoint,
    })
}

/// Gradient in the requested mode.
pub fn gradient(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
    mode: GradientMode,
) -> Result<GradientRep> {
    match mode {
        GradientMode::ContinuousAdjoint => gradient_continuous(sys, cost_fn, params, u),
        GradientMode::DiscreteAdjoint => gradient_discrete(sys, cost_fn, params, u),
    }
}

/// Representations of the end-point differential rows
/// `g^j(tau) = (e_j^T M(1) M^{-1}(tau) F(x(tau)))^T`, assembled with the same
/// backward integration and Simpson averaging as the cost gradient.
pub fn endpoint_rows(
    sys: &ControlSystem,
    params: &CostParams,
    u: &Control,
) -> Result<EndpointRows> {
    let traj = integrate_state(sys, &params.x0, u)?;
    let n = sys.state_dim();
    let mut rows = Vec::with_capacity(n);
    for jc in 0..n {
        let mut terminal = DVector::zeros(n);
        terminal[jc] = 1.0;
        let path = integrate_adjoint(sys, &traj, u, &terminal)?;
        rows.push(simpson_covector_average(sys, &traj, u, &path));
    }
    Ok(EndpointRows { rows })
}
