//! Grid discretization of controls and the RK4 integrators for the state,
//! fundamental-matrix, adjoint, and first-variation equations.
//!
//! Controls are piecewise constant on a uniform grid of `N` subintervals of
//! `[0,1]` (sample-and-hold). Every integrator takes classic 4-stage RK4
//! steps per subinterval, re-evaluating Jacobians at the stage states of the
//! state integration, so that all sensitivities are consistent with the same
//! discrete flow map: the fundamental matrix is the exact Jacobian of the
//! discrete step, the first variation its exact tangent, and the adjoint its
//! exact transpose propagation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::ControlSystem;

/// Piecewise-constant admissible control: `values` has one row per
/// subinterval, `u[j]` constant on `[j/N, (j+1)/N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    values: DMatrix<f64>,
}

impl Control {
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "control entries must be finite"
        );
        Control { values }
    }

    pub fn zeros(grid_size: usize, dim: usize) -> Self {
        Control {
            values: DMatrix::zeros(grid_size, dim),
        }
    }

    /// Control constant in `s`.
    pub fn constant(grid_size: usize, value: &DVector<f64>) -> Self {
        Control {
            values: DMatrix::from_fn(grid_size, value.len(), |_, i| value[i]),
        }
    }

    pub fn from_fn(grid_size: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Control {
            values: DMatrix::from_fn(grid_size, dim, |j, i| f(j, i)),
        }
    }

    /// Number of subintervals `N`.
    pub fn grid_size(&self) -> usize {
        self.values.nrows()
    }

    /// Control dimension `k`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Value on subinterval `j` as a column vector.
    pub fn value_at(&self, j: usize) -> DVector<f64> {
        self.values.row(j).transpose()
    }

    /// All subinterval values, extracted once.
    pub fn rows(&self) -> Vec<DVector<f64>> {
        (0..self.grid_size()).map(|j| self.value_at(j)).collect()
    }

    /// `L^2([0,1])` inner product; exact for piecewise-constant controls.
    pub fn inner(&self, other: &Control) -> f64 {
        assert_eq!(self.values.shape(), other.values.shape());
        self.values.dot(&other.values) / self.grid_size() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// `self + scale * other`.
    pub fn axpy(&self, scale: f64, other: &Control) -> Control {
        assert_eq!(self.values.shape(), other.values.shape());
        Control {
            values: &self.values + scale * &other.values,
        }
    }

    pub fn scale(&self, factor: f64) -> Control {
        Control {
            values: factor * &self.values,
        }
    }
}

/// Integrated state path at the grid nodes; `nodes[j]` approximates
/// `x_u(j/N)` and `nodes[0]` is the initial point exactly.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub nodes: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn grid_size(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.nodes.last().expect("trajectory has at least one node")
    }
}

/// Fundamental matrix `M` (with `M[0] = Id`) and the independently
/// integrated inverse path `N_inv`.
#[derive(Debug, Clone)]
pub struct FundamentalMatrices {
    pub m: Vec<DMatrix<f64>>,
    pub n_inv: Vec<DMatrix<f64>>,
}

/// Costate path of row covectors; `lambda[N]` equals the supplied terminal
/// covector exactly.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub lambda: Vec<DVector<f64>>,
}

/// Stage states of one RK4 step with frozen control value.
pub(crate) struct Rk4Stages {
    /// Stage states `s1 = x`, `s2 = x + h/2 k1`, `s3 = x + h/2 k2`,
    /// `s4 = x + h k3`.
    pub s: [DVector<f64>; 4],
}

pub(crate) fn rk4_step(
    sys: &ControlSystem,
    x: &DVector<f64>,
    w: &DVector<f64>,
    h: f64,
) -> (DVector<f64>, Rk4Stages) {
    let s1 = x.clone();
    let k1 = sys.apply_fields(&s1, w);
    let s2 = x + (h / 2.0) * &k1;
    let k2 = sys.apply_fields(&s2, w);
    let s3 = x + (h / 2.0) * &k2;
    let k3 = sys.apply_fields(&s3, w);
    let s4 = x + h * &k3;
    let k4 = sys.apply_fields(&s4, w);
    let next = x + (h / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
    (
        next,
        Rk4Stages {
            s: [s1, s2, s3, s4],
        },
    )
}

fn check_finite(x: &DVector<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

/// Reusable buffers for the allocation-free RK4 cell kernel.
pub(crate) struct CellBuffers {
    pub s2: DVector<f64>,
    pub s3: DVector<f64>,
    pub s4: DVector<f64>,
    pub k1: DVector<f64>,
    pub k2: DVector<f64>,
    pub k3: DVector<f64>,
    pub k4: DVector<f64>,
}

impl CellBuffers {
    pub fn new(n: usize) -> Self {
        CellBuffers {
            s2: DVector::zeros(n),
            s3: DVector::zeros(n),
            s4: DVector::zeros(n),
            k1: DVector::zeros(n),
            k2: DVector::zeros(n),
            k3: DVector::zeros(n),
            k4: DVector::zeros(n),
        }
    }
}

/// Advance `x` by one RK4 cell in place; stage states are left in the
/// buffers (`x` on entry is stage one).
pub(crate) fn rk4_cell_inplace(
    sys: &ControlSystem,
    x: &mut DVector<f64>,
    w: &[f64],
    h: f64,
    b: &mut CellBuffers,
) {
    sys.apply_fields_into(x.as_slice(), w, &mut b.k1);
    b.s2.copy_from(x);
    b.s2.axpy(h / 2.0, &b.k1, 1.0);
    sys.apply_fields_into(b.s2.as_slice(), w, &mut b.k2);
    b.s3.copy_from(x);
    b.s3.axpy(h / 2.0, &b.k2, 1.0);
    sys.apply_fields_into(b.s3.as_slice(), w, &mut b.k3);
    b.s4.copy_from(x);
    b.s4.axpy(h, &b.k3, 1.0);
    sys.apply_fields_into(b.s4.as_slice(), w, &mut b.k4);
    x.axpy(h / 6.0, &b.k1, 1.0);
    x.axpy(h / 3.0, &b.k2, 1.0);
    x.axpy(h / 3.0, &b.k3, 1.0);
    x.axpy(h / 6.0, &b.k4, 1.0);
}

/// Endpoint-only state integration; the hot path behind cost evaluations
/// inside the flow loop.
pub(crate) fn integrate_endpoint(
    sys: &ControlSystem,
    x0: &DVector<f64>,
    u: &Control,
) -> Result<DVector<f64>> {
    let n_cells = u.grid_size();
    let h = 1.0 / n_cells as f64;
    let mut x = x0.clone();
    let mut bufs = CellBuffers::new(sys.state_dim());
    let values = u.values();
    let k = u.dim();
    let mut w = vec![0.0; k];
    for j in 0..n_cells {
        for i in 0..k {
            w[i] = values[(j, i)];
        }
        rk4_cell_inplace(sys, &mut x, &w, h, &mut bufs);
        check_finite(&x, j)?;
    }
    Ok(x)
}

/// Integrate the controlled state equation `dx/ds = F(x) u` on the grid.
pub fn integrate_state(
    sys: &ControlSystem,
    x0: &DVector<f64>,
    u: &Control,
) -> Result<Trajectory> {
    assert_eq!(x0.len(), sys.state_dim(), "initial state dimension");
    assert_eq!(u.dim(), sys.control_dim(), "control dimension");
    let n_cells = u.grid_size();
    let h = 1.0 / n_cells as f64;
    let mut nodes = Vec::with_capacity(n_cells + 1);
    nodes.push(x0.clone());
    let rows = u.rows();
    for (j, w) in rows.iter().enumerate() {
        let (next, _) = rk4_step(sys, &nodes[j], w, h);
        check_finite(&next, j)?;
        nodes.push(next);
    }
    Ok(Trajectory { nodes })
}

/// Integrate `dM/ds = A_u M` with `M(0) = Id`, together with the inverse
/// path `dN/ds = -N A_u`, `N(0) = Id`. Stage states of the state step are
/// recomputed so the step map of `M` is the exact Jacobian of the discrete
/// state step.
pub fn integrate_fundamental(
    sys: &ControlSystem,
    traj: &Trajectory,
    u: &Control,
) -> Result<FundamentalMatrices> {
    let n = sys.state_dim();
    let n_cells = u.grid_size();
    assert_eq!(traj.grid_size(), n_cells, "trajectory/control grid mismatch");
    let h = 1.0 / n_cells as f64;
    let mut m = Vec::with_capacity(n_cells + 1);
    let mut n_inv = Vec::with_capacity(n_cells + 1);
    m.push(DMatrix::identity(n, n));
    n_inv.push(DMatrix::identity(n, n));
    let rows = u.rows();
    for (j, w) in rows.iter().enumerate() {
        let (_, stages) = rk4_step(sys, &traj.nodes[j], w, h);
        let a: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, w)).collect();

        let mj = &m[j];
        let k1 = &a[0] * mj;
        let k2 = &a[1] * &(mj + (h / 2.0) * &k1);
        let k3 = &a[2] * &(mj + (h / 2.0) * &k2);
        let k4 = &a[3] * &(mj + h * &k3);
        let m_next = mj + (h / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);

        let nj = &n_inv[j];
        let l1 = -(nj * &a[0]);
        let l2 = -(&(nj + (h / 2.0) * &l1) * &a[1]);
        let l3 = -(&(nj + (h / 2.0) * &l2) * &a[2]);
        let l4 = -(&(nj + h * &l3) * &a[3]);
        let n_next = nj + (h / 6.0) * (&l1 + 2.0 * &l2 + 2.0 * &l3 + &l4);

        if !m_next.iter().all(|v| v.is_finite()) || !n_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: j });
        }
        m.push(m_next);
        n_inv.push(n_next);
    }
    Ok(FundamentalMatrices { m, n_inv })
}

/// Integrate the costate equation `dlambda/ds = -lambda A_u` backward from
/// `lambda(1) = terminal`. The backward step mirrors the forward stage
/// states in reverse order, which makes each step the exact transpose of
/// the fundamental-matrix step.
pub fn integrate_adjoint(
    sys: &ControlSystem,
    traj: &Trajectory,
    u: &Control,
    terminal: &DVector<f64>,
) -> Result<AdjointPath> {
    assert!(terminal.iter().all(|v| v.is_finite()), "terminal covector");
    let n_cells = u.grid_size();
    assert_eq!(traj.grid_size(), n_cells, "trajectory/control grid mismatch");
    let h = 1.0 / n_cells as f64;
    let mut lambda = vec![DVector::zeros(sys.state_dim()); n_cells + 1];
    lambda[n_cells] = terminal.clone();
    let rows = u.rows();
    for j in (0..n_cells).rev() {
        let w = &rows[j];
        let (_, stages) = rk4_step(sys, &traj.nodes[j], w, h);
        // Transposed A at stage states in reverse order (s4, s3, s2, s1).
        let at: Vec<DMatrix<f64>> = stages
            .s
            .iter()
            .rev()
            .map(|s| sys.a_matrix(s, w).transpose())
            .collect();
        let mu = &lambda[j + 1];
        let q1 = &at[0] * mu;
        let q2 = &at[1] * &(mu + (h / 2.0) * &q1);
        let q3 = &at[2] * &(mu + (h / 2.0) * &q2);
        let q4 = &at[3] * &(mu + h * &q3);
        let prev = mu + (h / 6.0) * (&q1 + 2.0 * &q2 + 2.0 * &q3 + &q4);
        check_finite(&prev, j)?;
        lambda[j] = prev;
    }
    Ok(AdjointPath { lambda })
}

/// First-order variation `y` of the trajectory under control perturbation
/// `v`: solves `dy/ds = F(x_u) v + A_u y`, `y(0) = 0`. With stage-consistent
/// Jacobian evaluations this is the exact tangent of the discrete state map.
pub fn first_variation(
    sys: &ControlSystem,
    x0: &DVector<f64>,
    u: &Control,
    v: &Control,
) -> Result<Vec<DVector<f64>>> {
    assert_eq!(u.grid_size(), v.grid_size(), "grid mismatch");
    assert_eq!(u.dim(), v.dim(), "control dimension mismatch");
    let n_cells = u.grid_size();
    let h = 1.0 / n_cells as f64;
    let mut x = x0.clone();
    let mut y = vec![DVector::zeros(sys.state_dim()); n_cells + 1];
    let u_rows = u.rows();
    let v_rows = v.rows();
    for j in 0..n_cells {
        let w = &u_rows[j];
        let vj = &v_rows[j];
        let (x_next, stages) = rk4_step(sys, &x, w, h);
        let a: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, w)).collect();
        let fv: Vec<DVector<f64>> = stages.s.iter().map(|s| sys.apply_fields(s, vj)).collect();

        let yj = &y[j];
        let l1 = &a[0] * yj + &fv[0];
        let l2 = &a[1] * &(yj + (h / 2.0) * &l1) + &fv[1];
        let l3 = &a[2] * &(yj + (h / 2.0) * &l2) + &fv[2];
        let l4 = &a[3] * &(yj + h * &l3) + &fv[3];
        let y_next = yj + (h / 6.0) * (&l1 + 2.0 * &l2 + 2.0 * &l3 + &l4);
        check_finite(&y_next, j)?;
        check_finite(&x_next, j)?;
        y[j + 1] = y_next;
        x = x_next;
    }
    Ok(y)
}

/// A-priori sup-norm bound `(|x0| + sqrt(k) C ||u||) exp(sqrt(k) C ||u||)`
/// on the trajectory, using the system's sub-linear growth constant.
pub fn c0_bound(sys: &ControlSystem, x0: &DVector<f64>, u: &Control) -> Result<f64> {
    let hint = sys.lipschitz_hint().ok_or(Error::MissingHint)?;
    let k = sys.control_dim() as f64;
    let growth = k.sqrt() * hint.c * u.l2_norm();
    Ok((x0.norm() + growth) * growth.exp())
}
