//! Second variation of the end-point map and matrix-free Hessian probes.
//!
//! The default Hessian-vector product differentiates the discrete reverse
//! pass exactly (tangent of the adjoint sweep), so it is symmetric to
//! machine precision and consistent with `gradient_discrete`. The operator
//! assembly from the costate/fundamental-matrix representation is kept as a
//! structural cross-check mode. A block orthogonal iteration on `H - Id`
//! exposes the compact-perturbation-of-identity spectrum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradient::CostParams;
use crate::system::{ControlSystem, EndpointCost};
use crate::trajectory::{
    first_variation, integrate_adjoint, integrate_fundamental, integrate_state, rk4_step, Control,
    Rk4Stages,
};

/// Second-order variation `z_u^{v,w}(1)` of the trajectory: the joint
/// `(x, y^v, y^w, z)` system is integrated in one RK4 sweep with shared
/// stage states, which makes the result exactly bilinear and symmetric in
/// `(v, w)`.
pub fn second_variation(
    sys: &ControlSystem,
    x0: &DVector<f64>,
    u: &Control,
    v: &Control,
    w: &Control,
) -> Result<DVector<f64>> {
    let n_cells = u.grid_size();
    assert_eq!(v.grid_size(), n_cells);
    assert_eq!(w.grid_size(), n_cells);
    let h = 1.0 / n_cells as f64;
    let nd = sys.state_dim();

    let mut x = x0.clone();
    let mut yv = DVector::zeros(nd);
    let mut yw = DVector::zeros(nd);
    let mut z = DVector::zeros(nd);
    let u_rows = u.rows();
    let v_rows = v.rows();
    let w_rows = w.rows();

    for j in 0..n_cells {
        let uc = &u_rows[j];
        let vc = &v_rows[j];
        let wc = &w_rows[j];
        let (x_next, stages) = rk4_step(sys, &x, uc, h);
        if !x_next.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFiniteState { step: j });
        }
        let a: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, uc)).collect();

        // Stage vectors of the two first variations.
        let mut yv_st = [yv.clone(), yv.clone(), yv.clone(), yv.clone()];
        let mut yw_st = [yw.clone(), yw.clone(), yw.clone(), yw.clone()];
        let mut lv = Vec::with_capacity(4);
        let mut lw = Vec::with_capacity(4);
        let offsets = [0.0, h / 2.0, h / 2.0, h];
        for i in 0..4 {
            if i > 0 {
                yv_st[i] = &yv + offsets[i] * &lv[i - 1];
                yw_st[i] = &yw + offsets[i] * &lw[i - 1];
            }
            lv.push(&a[i] * &yv_st[i] + sys.apply_fields(&stages.s[i], vc));
            lw.push(&a[i] * &yw_st[i] + sys.apply_fields(&stages.s[i], wc));
        }

        // Stage vectors of the second variation.
        let mut z_st = z.clone();
        let mut lz = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                z_st = &z + offsets[i] * &lz[i - 1];
            }
            let slope = sys.a_matrix(&stages.s[i], wc) * &yv_st[i]
                + sys.a_matrix(&stages.s[i], vc) * &yw_st[i]
                + sys.hessian_bilinear(&stages.s[i], uc, &yv_st[i], &yw_st[i])
                + &a[i] * &z_st;
            lz.push(slope);
        }

        yv += (h / 6.0) * (&lv[0] + 2.0 * &lv[1] + 2.0 * &lv[2] + &lv[3]);
        yw += (h / 6.0) * (&lw[0] + 2.0 * &lw[1] + 2.0 * &lw[2] + &lw[3]);
        z += (h / 6.0) * (&lz[0] + 2.0 * &lz[1] + 2.0 * &lz[2] + &lz[3]);
        x = x_next;
    }
    if !z.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFiniteState { step: n_cells });
    }
    Ok(z)
}

/// Matrix-free Hessian of the penalized cost at a base control.
///
/// Construction runs the forward and reverse sweeps once; afterwards the
/// operator is read-only and shareable, and each `apply` costs one tangent
/// forward plus one tangent reverse sweep.
pub struct HessianOperator<'a> {
    sys: &'a ControlSystem,
    cost_fn: &'a EndpointCost,
    pub params: CostParams,
    pub base: Control,
    u_rows: Vec<DVector<f64>>,
    stages_all: Vec<Rk4Stages>,
    x_final: DVector<f64>,
    /// Adjoint states of the reverse sweep, seeded with `grad a`, per node.
    xbar_nodes: Vec<DVector<f64>>,
}

impl<'a> HessianOperator<'a> {
    pub fn new(
        sys: &'a ControlSystem,
        cost_fn: &'a EndpointCost,
        params: &CostParams,
        u: &Control,
    ) -> Result<Self> {
        let n_cells = u.grid_size();
        let h = 1.0 / n_cells as f64;
        let u_rows = u.rows();

        let mut x = params.x0.clone();
        let mut stages_all = Vec::with_capacity(n_cells);
        for (j, w) in u_rows.iter().enumerate() {
            let (x_next, stages) = rk4_step(sys, &x, w, h);
            if !x_next.iter().all(|t| t.is_finite()) {
                return Err(Error::NonFiniteState { step: j });
            }
            stages_all.push(stages);
            x = x_next;
        }

        let mut xbar_nodes = vec![DVector::zeros(sys.state_dim()); n_cells + 1];
        xbar_nodes[n_cells] = cost_fn.gradient(&x);
        for j in (0..n_cells).rev() {
            let (xb, _) = reverse_cell(sys, &stages_all[j], &u_rows[j], &xbar_nodes[j + 1], h);
            xbar_nodes[j] = xb;
        }

        Ok(HessianOperator {
            sys,
            cost_fn,
            params: params.clone(),
            base: u.clone(),
            u_rows,
            stages_all,
            x_final: x,
            xbar_nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.grid_size() * self.base.dim()
    }

    /// Exact Hessian-vector product `v + beta * Hess_E[v]` of the discrete cost.
    pub fn apply(&self, v: &Control) -> Control {
        let n_cells = self.base.grid_size();
        let k = self.base.dim();
        let h = 1.0 / n_cells as f64;
        let sys = self.sys;
        let v_rows = v.rows();

        // Tangent forward sweep: first variation with stage states kept.
        let mut yd = DVector::zeros(sys.state_dim());
        let mut sdot_all: Vec<[DVector<f64>; 4]> = Vec::with_capacity(n_cells);
        let offsets = [0.0, h / 2.0, h / 2.0, h];
        for j in 0..n_cells {
            let stages = &self.stages_all[j];
            let uc = &self.u_rows[j];
            let vc = &v_rows[j];
            let mut sdot = [yd.clone(), yd.clone(), yd.clone(), yd.clone()];
            let mut slopes: Vec<DVector<f64>> = Vec::with_capacity(4);
            for i in 0..4 {
                if i > 0 {
                    sdot[i] = &yd + offsets[i] * &slopes[i - 1];
                }
                slopes.push(
                    sys.a_matrix(&stages.s[i], uc) * &sdot[i]
                        + sys.apply_fields(&stages.s[i], vc),
                );
            }
            yd += (h / 6.0) * (&slopes[0] + 2.0 * &slopes[1] + 2.0 * &slopes[2] + &slopes[3]);
            sdot_all.push(sdot);
        }

        // Tangent reverse sweep.
        let mut xbd = self.cost_fn.hessian(&self.x_final) * &yd;
        let mut out = DMatrix::zeros(n_cells, k);
        for j in (0..n_cells).rev() {
            let stages = &self.stages_all[j];
            let uc = &self.u_rows[j];
            let vc = &v_rows[j];
            let sdot = &sdot_all[j];
            let xb_next = &self.xbar_nodes[j + 1];

            // Recompute the primal reverse intermediates for this cell.
            let a: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, uc)).collect();
            let av: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, vc)).collect();
            let mut kb = [
                (h / 6.0) * xb_next,
                (h / 3.0) * xb_next,
                (h / 3.0) * xb_next,
                (h / 6.0) * xb_next,
            ];
            let mut kbd = [
                (h / 6.0) * &xbd,
                (h / 3.0) * &xbd,
                (h / 3.0) * &xbd,
                (h / 6.0) * &xbd,
            ];
            let mut wbd = DVector::zeros(k);
            let factors = [h / 2.0, h / 2.0, h];
            for i in (0..4).rev() {
                let sb = a[i].tr_mul(&kb[i]);
                let sbd = av[i].tr_mul(&kb[i])
                    + sys.hessian_transpose_contract(&stages.s[i], uc, &sdot[i], &kb[i])
                    + a[i].tr_mul(&kbd[i]);
                wbd += sys.jacobian_pairing(&stages.s[i], &kb[i], &sdot[i])
                    + sys.fields_transpose_apply(&stages.s[i], &kbd[i]);
                xbd += &sbd;
                if i > 0 {
                    kb[i - 1] += factors[i - 1] * &sb;
                    kbd[i - 1] += factors[i - 1] * &sbd;
                }
            }
            for i in 0..k {
                out[(j, i)] =
                    v.values()[(j, i)] + self.params.beta * n_cells as f64 * wbd[i];
            }
        }
        Control::from_matrix(out)
    }
}

/// Primal reverse pass over one cell: returns the pulled-back state
/// cotangent and the control cotangent.
fn reverse_cell(
    sys: &ControlSystem,
    stages: &Rk4Stages,
    uc: &DVector<f64>,
    xb_next: &DVector<f64>,
    h: f64,
) -> (DVector<f64>, DVector<f64>) {
    let k = uc.len();
    let a: Vec<DMatrix<f64>> = stages.s.iter().map(|s| sys.a_matrix(s, uc)).collect();
    let mut kb = [
        (h / 6.0) * xb_next,
        (h / 3.0) * xb_next,
        (h / 3.0) * xb_next,
        (h / 6.0) * xb_next,
    ];
    let mut wb = DVector::zeros(k);
    let mut xb = xb_next.clone();
    let factors = [h / 2.0, h / 2.0, h];
    for i in (0..4).rev() {
        let sb = a[i].tr_mul(&kb[i]);
        wb += sys.fields_transpose_apply(&stages.s[i], &kb[i]);
        xb += &sb;
        if i > 0 {
            kb[i - 1] += factors[i - 1] * &sb;
        }
    }
    (xb, wb)
}

/// Hessian-vector product in the default (exact discrete) mode.
pub fn hessian_apply(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
    v: &Control,
) -> Result<Control> {
    Ok(HessianOperator::new(sys, cost_fn, params, u)?.apply(v))
}

/// Hessian-vector product assembled from the costate representation:
/// rank-`n` end-point term plus the compact operator
/// `L* M^nu + (M^nu)* L + L* S^nu L`, sampled at subinterval midpoints.
pub fn hessian_apply_structural(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    u: &Control,
    v: &Control,
) -> Result<Control> {
    let n_cells = u.grid_size();
    let k = u.dim();
    let h = 1.0 / n_cells as f64;
    let traj = integrate_state(sys, &params.x0, u)?;
    let fm = integrate_fundamental(sys, &traj, u)?;
    let grad_a = cost_fn.gradient(traj.final_state());
    let path = integrate_adjoint(sys, &traj, u, &grad_a)?;
    let y = first_variation(sys, &params.x0, u, v)?;
    let m_final = fm.m.last().unwrap();

    let u_rows = u.rows();
    let v_rows = v.rows();
    let mid =
        |nodes: &[DVector<f64>], j: usize| -> DVector<f64> { 0.5 * (&nodes[j] + &nodes[j + 1]) };

    // Midpoint samples of M^nu[v] + S^nu L[v] and of M^T against them.
    let mut g_terms: Vec<DVector<f64>> = Vec::with_capacity(n_cells);
    let mut x_mids = Vec::with_capacity(n_cells);
    let mut lam_mids = Vec::with_capacity(n_cells);
    let mut y_mids = Vec::with_capacity(n_cells);
    for j in 0..n_cells {
        let x_mid = mid(&traj.nodes, j);
        let lam_mid = mid(&path.lambda, j);
        let y_mid = mid(&y, j);
        let m_mid = 0.5 * (&fm.m[j] + &fm.m[j + 1]);
        let w_cell = sys.a_matrix(&x_mid, &v_rows[j]).tr_mul(&lam_mid)
            + sys.hessian_transpose_contract(&x_mid, &u_rows[j], &y_mid, &lam_mid);
        g_terms.push(m_mid.tr_mul(&w_cell));
        x_mids.push(x_mid);
        lam_mids.push(lam_mid);
        y_mids.push(y_mid);
    }

    // Right cumulative integral Phi(tau_c) = int_{tau_c}^1 M^T w.
    let mut phi = vec![DVector::zeros(sys.state_dim()); n_cells];
    phi[n_cells - 1] = (h / 2.0) * &g_terms[n_cells - 1];
    for j in (0..n_cells - 1).rev() {
        phi[j] = &phi[j + 1] + (h / 2.0) * (&g_terms[j] + &g_terms[j + 1]);
    }

    let q = cost_fn.hessian(traj.final_state()) * y.last().unwrap();
    let mtq = m_final.tr_mul(&q);
    let mut out = DMatrix::zeros(n_cells, k);
    for j in 0..n_cells {
        let n_mid = 0.5 * (&fm.n_inv[j] + &fm.n_inv[j + 1]);
        // L* applied to the curvature terms.
        let lstar = sys.fields_transpose_apply(&x_mids[j], &n_mid.tr_mul(&phi[j]));
        // (M^nu)* L[v].
        let mstar = sys.jacobian_pairing(&x_mids[j], &lam_mids[j], &y_mids[j]);
        // Rank-n end-point curvature term.
        let rank_n = sys.fields_transpose_apply(&x_mids[j], &n_mid.tr_mul(&mtq));
        for i in 0..k {
            out[(j, i)] = v.values()[(j, i)]
                + params.beta * (lstar[i] + mstar[i] + rank_n[i]);
        }
    }
    Ok(Control::from_matrix(out))
}

/// Result of a spectrum probe: estimates of the extremal eigenvalues of the
/// Hessian, and of `H - Id` ordered by magnitude (the compactness profile).
#[derive(Debug, Clone)]
pub struct SpectrumProbe {
    pub eigenvalues: Vec<f64>,
    pub compact_eigenvalues: Vec<f64>,
    pub iterations: usize,
}

const EIG_MAX_ITER: usize = 500;
const EIG_TOL: f64 = 1e-8;

/// Estimate the `m` extremal eigenvalues of the Hessian by restarted block
/// orthogonal iteration with full reorthogonalization on `H - Id`.
pub fn spectrum_probe(op: &HessianOperator<'_>, m: usize) -> Result<SpectrumProbe> {
    let dim = op.dim();
    assert!(m >= 1 && m <= dim, "probe count must be in 1..=N*k");
    let block = (m + 8).min(dim);
    let n_cells = op.base.grid_size();
    let k = op.base.dim();

    let apply_b = |col: &DVector<f64>| -> DVector<f64> {
        let vc = Control::from_fn(n_cells, k, |j, i| col[j * k + i]);
        let hv = op.apply(&vc);
        DVector::from_fn(dim, |idx, _| {
            hv.values()[(idx / k, idx % k)] - vc.values()[(idx / k, idx % k)]
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_u64);
    let mut v_block = DMatrix::from_fn(dim, block, |_, _| rng.gen_range(-1.0..1.0));
    v_block = v_block.qr().q();

    let mut last_residual = f64::INFINITY;
    for iter in 1..=EIG_MAX_ITER {
        let mut w_block = DMatrix::zeros(dim, block);
        for c in 0..block {
            let col = v_block.column(c).clone_owned();
            w_block.set_column(c, &apply_b(&col));
        }
        let mut t = v_block.tr_mul(&w_block);
        t = 0.5 * (&t + t.transpose());
        let eig = nalgebra::SymmetricEigen::new(t);

        // Ritz pairs sorted by magnitude.
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap()
        });
        let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, e| acc.max(e.abs()));
        let mut worst = 0.0f64;
        for &idx in order.iter().take(m) {
            let s = eig.eigenvectors.column(idx);
            let ritz_vec = &v_block * s;
            let residual = (&w_block * s - eig.eigenvalues[idx] * &ritz_vec).norm();
            worst = worst.max(residual);
        }
        last_residual = worst;
        if worst <= EIG_TOL * scale {
            let compact: Vec<f64> = order
                .iter()
                .take(m)
                .map(|&idx| eig.eigenvalues[idx])
                .collect();
            let eigenvalues = compact.iter().map(|b| 1.0 + b).collect();
            return Ok(SpectrumProbe {
                eigenvalues,
                compact_eigenvalues: compact,
                iterations: iter,
            });
        }
        v_block = w_block.qr().q();
        // Rank-deficient images leave zero columns; refresh them randomly so
        // the basis stays full.
        for c in 0..block {
            if v_block.column(c).norm() < 0.5 {
                let fresh = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                v_block.set_column(c, &fresh);
            }
        }
        v_block = v_block.qr().q();
    }
    Err(Error::NoConvergence {
        iterations: EIG_MAX_ITER,
        residual: last_residual,
    })
}
