//! Acceptance suite: every numbered criterion runs at its stated tolerance
//! and prints one PASS line (failures panic with the measured value).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subflow::flow::{
    flow_step, lojasiewicz_estimate, run_flow, sobolev_seminorm, stationarity_residual,
    FlowConfig, FlowScheme,
};
use subflow::gamma::{beta_sweep, check_gamma_trends, BetaSchedule};
use subflow::gradient::{
    cost, gradient_continuous, gradient_discrete, CostParams, GradientMode,
};
use subflow::oracle::{fd_gradient, heisenberg_reference, linear_closed_form};
use subflow::second_order::{hessian_apply, spectrum_probe, HessianOperator};
use subflow::system::{
    make_grushin, make_heisenberg, make_linear, make_quadratic_cost, ControlSystem, EndpointCost,
};
use subflow::trajectory::{integrate_fundamental, integrate_state, Control};

fn scalar_linear() -> (ControlSystem, EndpointCost, CostParams) {
    let sys = make_linear(&DMatrix::from_row_slice(1, 1, &[1.0]));
    let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.0]));
    let params = CostParams::new(1.0, DVector::from_vec(vec![1.0]));
    (sys, cost_fn, params)
}

fn heisenberg(beta: f64) -> (ControlSystem, EndpointCost, CostParams) {
    let sys = make_heisenberg();
    let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.0, 0.0, 0.1]));
    let params = CostParams::new(beta, DVector::zeros(3));
    (sys, cost_fn, params)
}

fn loop_control(n_cells: usize, amplitude: f64) -> Control {
    Control::from_fn(n_cells, 2, |j, i| {
        let s = (j as f64 + 0.5) / n_cells as f64;
        let phase = 2.0 * std::f64::consts::PI * s;
        amplitude * if i == 0 { phase.cos() } else { phase.sin() }
    })
}

fn random_control(rng: &mut ChaCha8Rng, n_cells: usize, dim: usize, scale: f64) -> Control {
    Control::from_fn(n_cells, dim, |_, _| rng.gen_range(-scale..scale))
}

#[test]
fn criterion_01_closed_form_benchmark() {
    let start = Instant::now();
    let (sys, cost_fn, params) = scalar_linear();
    let trace = run_flow(
        &sys,
        &cost_fn,
        &params,
        &Control::zeros(64, 1),
        &FlowConfig::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    assert!(trace.converged, "flow did not converge");
    let (u_star, energy_star) = linear_closed_form(
        &DMatrix::from_row_slice(1, 1, &[1.0]),
        &params.x0,
        &DVector::from_vec(vec![0.0]),
        1.0,
        64,
    )
    .unwrap();
    let u_err = trace.final_control.axpy(-1.0, &u_star).l2_norm();
    let f_err = (trace.final_energy() - energy_star).abs();
    assert!(u_err <= 1e-6, "control error {u_err:.3e}");
    assert!(f_err <= 1e-8, "energy error {f_err:.3e}");
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?}");
    println!(
        "ACCEPTANCE 01 PASS: closed-form benchmark, |u - u*| = {u_err:.2e}, |F - 1/4| = {f_err:.2e}, {elapsed:?}"
    );
}

#[test]
fn criterion_02_gradient_exactness() {
    let (sys, cost_fn, params) = heisenberg(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let u = random_control(&mut rng, 32, 2, 1.0);
        let exact = gradient_discrete(&sys, &cost_fn, &params, &u).unwrap().g_full;
        let fd = fd_gradient(&sys, &cost_fn, &params, &u, 1e-5).unwrap();
        for j in 0..32 {
            for i in 0..2 {
                let e = exact.values()[(j, i)];
                let f = fd.values()[(j, i)];
                worst = worst.max((e - f).abs() / f.abs().max(1e-8));
            }
        }
    }
    assert!(worst <= 1e-6, "componentwise relative error {worst:.3e}");
    println!("ACCEPTANCE 02 PASS: discrete gradient vs FD oracle, worst rel err {worst:.2e}");
}

#[test]
fn criterion_03_adjoint_consistency_order() {
    // The order measurement needs a state-dependent Jacobian; on nilpotent
    // benchmarks the two gradient modes agree to roundoff and the ratio is
    // noise. F^1 = (1,0), F^2 = (0, x1^2).
    use subflow::system::{Monomial, Polynomial};
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
    let params = CostParams::new(5.0, DVector::from_vec(vec![0.3, 0.0]));
    let gap = |n_cells: usize| {
        let u = Control::from_fn(n_cells, 2, |j, i| {
            let s = (j as f64 + 0.5) / n_cells as f64;
            if i == 0 {
                (2.0 * std::f64::consts::PI * s).cos()
            } else {
                0.5 * (2.0 * std::f64::consts::PI * s).sin() + 0.3
            }
        });
        let gc = gradient_continuous(&sys, &cost_fn, &params, &u).unwrap().g_full;
        let gd = gradient_discrete(&sys, &cost_fn, &params, &u).unwrap().g_full;
        gc.axpy(-1.0, &gd).l2_norm()
    };
    let ratio = gap(32) / gap(64);
    assert!((2.5..=6.0).contains(&ratio), "gap ratio {ratio:.3}");
    println!("ACCEPTANCE 03 PASS: continuous/discrete gradient gap ratio {ratio:.2} in [2.5, 6]");
}

#[test]
fn criterion_04_dissipation() {
    // Monotonicity over accepted steps on both benchmarks.
    let (ssys, scost, sparams) = scalar_linear();
    let (hsys, hcost, hparams) = heisenberg(10.0);
    let traces = [
        run_flow(
            &ssys,
            &scost,
            &sparams,
            &Control::zeros(64, 1),
            &FlowConfig::default(),
        )
        .unwrap(),
        run_flow(
            &hsys,
            &hcost,
            &hparams,
            &loop_control(100, 0.5),
            &FlowConfig::default(),
        )
        .unwrap(),
    ];
    for trace in &traces {
        let accepted: Vec<_> = trace.accepted_steps().collect();
        for w in accepted.windows(2) {
            assert!(
                w[1].energy <= w[0].energy + 1e-12 * (1.0 + w[0].energy.abs()),
                "energy increased on an accepted step"
            );
        }
    }

    // Small-step rate identity at dt = 1e-3.
    let dt = 1e-3;
    let mut worst_dev = 0.0f64;
    for (sys, cost_fn, params, u) in [
        (&ssys, &scost, &sparams, Control::zeros(32, 1)),
        (&hsys, &hcost, &hparams, loop_control(64, 0.5)),
    ] {
        let g = gradient_discrete(sys, cost_fn, params, &u).unwrap().g_full;
        let f0 = cost(sys, cost_fn, params, &u).unwrap();
        let next = flow_step(
            sys,
            cost_fn,
            params,
            &u,
            dt,
            FlowScheme::ExplicitEuler,
            GradientMode::DiscreteAdjoint,
        )
        .unwrap();
        let f1 = cost(sys, cost_fn, params, &next).unwrap();
        let rate = (f0 - f1) / dt;
        let expected = g.l2_norm().powi(2);
        worst_dev = worst_dev.max((rate - expected).abs() / expected);
    }
    assert!(worst_dev <= 0.1, "rate deviation {worst_dev:.3}");
    println!("ACCEPTANCE 04 PASS: dissipation monotone; small-step rate within {worst_dev:.1e} of the gradient norm");
}

/// The benchmark sweep is expensive; run it once and share the result (and
/// its measured wall time) between the criteria that consume it.
fn heisenberg_sweep() -> &'static (subflow::gamma::SweepResult, f64) {
    use std::sync::OnceLock;
    static SWEEP: OnceLock<(subflow::gamma::SweepResult, f64)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let (sys, cost_fn, params) = heisenberg(1.0);
        let schedule = BetaSchedule::new(vec![1.0, 10.0, 100.0, 1000.0]);
        let start = Instant::now();
        let result =
            beta_sweep(&sys, &cost_fn, &params, &schedule, &loop_control(200, 0.5)).unwrap();
        (result, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_05_gamma_convergence_benchmark() {
    let (result, elapsed_secs) = heisenberg_sweep();
    assert!(result.failures.is_empty(), "sweep rows failed: {:?}", result.failures);
    assert_eq!(result.rows.len(), 4);
    for row in &result.rows {
        assert!(row.converged, "beta {} did not converge", row.beta);
    }
    let reference = heisenberg_reference(0.1);
    let rel = (result.limit_energy_estimate - reference).abs() / reference;
    assert!(rel <= 0.05, "limit energy off by {:.2}%", 100.0 * rel);
    for w in result.rows.windows(2) {
        assert!(
            w[1].endpoint_gap < w[0].endpoint_gap,
            "gap not strictly decreasing"
        );
        assert!(
            w[1].endpoint_gap <= 0.5 * w[0].endpoint_gap,
            "gap ratio {} > 0.5",
            w[1].endpoint_gap / w[0].endpoint_gap
        );
    }
    assert!(*elapsed_secs < 60.0, "runtime {elapsed_secs:.1} s");
    println!(
        "ACCEPTANCE 05 PASS: beta sweep reaches {:.6} vs 2*pi*0.1 = {reference:.6} ({:.2}% off), gaps halve per decade, {elapsed_secs:.1} s",
        result.limit_energy_estimate,
        100.0 * rel
    );

    // Criterion 10 on the largest-beta row of this sweep.
    let (sys, cost_fn, _) = heisenberg(1000.0);
    let row_params = CostParams::new(1000.0, DVector::zeros(3));
    let res = stationarity_residual(
        &sys,
        &cost_fn,
        &row_params,
        &result.rows[3].minimizer,
        GradientMode::DiscreteAdjoint,
    )
    .unwrap();
    assert!(res <= 1e-6, "sweep stationarity {res:.3e}");
}

#[test]
fn criterion_06_monotone_beta_totals() {
    let (result, _) = heisenberg_sweep();
    let trends = check_gamma_trends(result).unwrap();
    assert!(
        trends.totals_nondecreasing,
        "totals decreased: {:?}",
        trends.totals
    );
    println!(
        "ACCEPTANCE 06 PASS: totals nondecreasing across the sweep: {:?}",
        trends.totals
    );
}

#[test]
fn criterion_07_hessian() {
    // Symmetry on random pairs.
    let (sys, cost_fn, params) = heisenberg(7.0);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let u = random_control(&mut rng, 24, 2, 1.0);
    let op = HessianOperator::new(&sys, &cost_fn, &params, &u).unwrap();
    let mut worst_sym = 0.0f64;
    for _ in 0..20 {
        let v = random_control(&mut rng, 24, 2, 1.0);
        let w = random_control(&mut rng, 24, 2, 1.0);
        let lhs = op.apply(&v).inner(&w);
        let rhs = op.apply(&w).inner(&v);
        worst_sym = worst_sym.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    assert!(worst_sym <= 1e-8, "symmetry residual {worst_sym:.3e}");

    // Hessian-vector product against finite differences of the gradient.
    let (sys32, cost32, params32) = heisenberg(10.0);
    let u32c = random_control(&mut rng, 32, 2, 1.0);
    let v32 = random_control(&mut rng, 32, 2, 1.0);
    let hv = hessian_apply(&sys32, &cost32, &params32, &u32c, &v32).unwrap();
    let eps = 1e-5;
    let g0 = gradient_discrete(&sys32, &cost32, &params32, &u32c).unwrap().g_full;
    let g1 = gradient_discrete(&sys32, &cost32, &params32, &u32c.axpy(eps, &v32))
        .unwrap()
        .g_full;
    let fd_rel = g1.axpy(-1.0, &g0).scale(1.0 / eps).axpy(-1.0, &hv).l2_norm() / hv.l2_norm();
    assert!(fd_rel <= 1e-5, "FD-of-gradient rel err {fd_rel:.3e}");

    // Scalar-linear spectrum: top eigenvalue is 1 + beta.
    for beta in [1.0, 3.0] {
        let sys = make_linear(&DMatrix::from_row_slice(1, 1, &[1.0]));
        let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.0]));
        let params = CostParams::new(beta, DVector::from_vec(vec![1.0]));
        let u0 = Control::zeros(24, 1);
        let op = HessianOperator::new(&sys, &cost_fn, &params, &u0).unwrap();
        let probe = spectrum_probe(&op, 4).unwrap();
        assert!(
            (probe.eigenvalues[0] - (1.0 + beta)).abs() <= 1e-6,
            "beta {beta}: top eigenvalue {}",
            probe.eigenvalues[0]
        );
    }
    println!(
        "ACCEPTANCE 07 PASS: Hessian symmetry {worst_sym:.1e}, FD consistency {fd_rel:.1e}, rank-one spectrum exact"
    );
}

#[test]
fn criterion_08_fundamental_matrix_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let benchmarks: Vec<(&str, ControlSystem, DVector<f64>)> = vec![
        (
            "scalar-linear",
            make_linear(&DMatrix::from_row_slice(1, 1, &[1.0])),
            DVector::from_vec(vec![1.0]),
        ),
        ("heisenberg", make_heisenberg(), DVector::zeros(3)),
        ("grushin", make_grushin(), DVector::from_vec(vec![0.3, 0.0])),
    ];
    let mut worst = 0.0f64;
    for (name, sys, x0) in &benchmarks {
        for _ in 0..5 {
            let u = random_control(&mut rng, 64, sys.control_dim(), 1.0);
            let traj = integrate_state(sys, x0, &u).unwrap();
            let fm = integrate_fundamental(sys, &traj, &u).unwrap();
            let id = DMatrix::identity(sys.state_dim(), sys.state_dim());
            for j in 0..=64 {
                let defect = (&fm.m[j] * &fm.n_inv[j] - &id).norm();
                assert!(defect <= 1e-8, "{name}: node {j} defect {defect:.3e}");
                worst = worst.max(defect);
            }
        }
    }
    println!("ACCEPTANCE 08 PASS: M * N_inv identity on all benchmarks, worst defect {worst:.2e}");
}

#[test]
fn criterion_09_variation_orders() {
    let (sys, cost_fn, params) = heisenberg(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let u = random_control(&mut rng, 64, 2, 1.0);
    let v = random_control(&mut rng, 64, 2, 1.0);

    // First variation: remainder drops at least 3.5x per halving.
    let base = integrate_state(&sys, &params.x0, &u).unwrap();
    let y = subflow::trajectory::first_variation(&sys, &params.x0, &u, &v).unwrap();
    let y1 = y.last().unwrap();
    let first_err = |eps: f64| {
        let pert = integrate_state(&sys, &params.x0, &u.axpy(eps, &v)).unwrap();
        (pert.final_state() - base.final_state() - eps * y1).norm()
    };
    let f = [first_err(1e-2), first_err(5e-3), first_err(2.5e-3)];
    let r1 = f[0] / f[1];
    let r2 = f[1] / f[2];
    assert!(r1 >= 3.5 && r2 >= 3.5, "first-variation ratios {r1:.2}, {r2:.2}");

    // Second-order Taylor: remainder drops at least 6x per halving.
    let u2 = random_control(&mut rng, 32, 2, 0.8);
    let v2 = random_control(&mut rng, 32, 2, 0.8);
    let f0 = cost(&sys, &cost_fn, &params, &u2).unwrap();
    let g = gradient_discrete(&sys, &cost_fn, &params, &u2).unwrap().g_full;
    let hv = hessian_apply(&sys, &cost_fn, &params, &u2, &v2).unwrap();
    let gv = g.inner(&v2);
    let hvv = hv.inner(&v2);
    let taylor = |eps: f64| {
        let fe = cost(&sys, &cost_fn, &params, &u2.axpy(eps, &v2)).unwrap();
        (fe - f0 - eps * gv - 0.5 * eps * eps * hvv).abs()
    };
    let t = [taylor(1e-2), taylor(5e-3), taylor(2.5e-3)];
    let t1 = t[0] / t[1];
    let t2 = t[1] / t[2];
    assert!(t1 >= 6.0 && t2 >= 6.0, "Taylor ratios {t1:.2}, {t2:.2}");
    println!(
        "ACCEPTANCE 09 PASS: first-variation ratios {r1:.1}/{r2:.1} >= 3.5, Taylor ratios {t1:.1}/{t2:.1} >= 6"
    );
}

#[test]
fn criterion_10_stationarity_at_convergence() {
    let eps_stop = FlowConfig::default().eps_stop;
    let mut worst = 0.0f64;

    let (ssys, scost, sparams) = scalar_linear();
    let trace = run_flow(
        &ssys,
        &scost,
        &sparams,
        &Control::zeros(64, 1),
        &FlowConfig::default(),
    )
    .unwrap();
    assert!(trace.converged);
    worst = worst.max(
        stationarity_residual(
            &ssys,
            &scost,
            &sparams,
            &trace.final_control,
            GradientMode::DiscreteAdjoint,
        )
        .unwrap(),
    );

    let (hsys, hcost, hparams) = heisenberg(10.0);
    let trace = run_flow(
        &hsys,
        &hcost,
        &hparams,
        &loop_control(100, 0.5),
        &FlowConfig::default(),
    )
    .unwrap();
    assert!(trace.converged);
    worst = worst.max(
        stationarity_residual(
            &hsys,
            &hcost,
            &hparams,
            &trace.final_control,
            GradientMode::DiscreteAdjoint,
        )
        .unwrap(),
    );

    assert!(worst <= eps_stop, "residual {worst:.3e} > {eps_stop:.1e}");
    println!("ACCEPTANCE 10 PASS: stationarity residual {worst:.2e} <= {eps_stop:.0e} on all converged runs");
}

#[test]
fn criterion_11_lojasiewicz_exponent() {
    let (sys, cost_fn, params) = scalar_linear();
    let cfg = FlowConfig {
        dt0: 0.02,
        eps_stop: 1e-6,
        ..FlowConfig::default()
    };
    let trace = run_flow(&sys, &cost_fn, &params, &Control::zeros(64, 1), &cfg).unwrap();
    assert!(trace.converged);
    let gamma = lojasiewicz_estimate(&trace, trace.final_energy()).unwrap();
    assert!((1.8..=2.2).contains(&gamma), "gamma {gamma:.3}");
    println!("ACCEPTANCE 11 PASS: Lojasiewicz exponent {gamma:.3} in [1.8, 2.2]");
}

#[test]
fn criterion_12_sobolev_fixed_point() {
    let (sys, cost_fn, params) = heisenberg(10.0);
    let trace = run_flow(
        &sys,
        &cost_fn,
        &params,
        &loop_control(100, 0.5),
        &FlowConfig::default(),
    )
    .unwrap();
    assert!(trace.converged);
    let u_final = &trace.final_control;
    let h1_u = sobolev_seminorm(u_final, 1).unwrap();
    let rep = gradient_continuous(&sys, &cost_fn, &params, u_final).unwrap();
    let h1_h = sobolev_seminorm(&rep.h, 1).unwrap();
    let rel = (h1_u - params.beta * h1_h).abs() / h1_u;
    assert!(rel <= 0.01, "fixed-point seminorm mismatch {:.3}%", 100.0 * rel);
    // Supremum of the recorded H1 seminorms stays finite along the flow.
    let sup_h1 = trace
        .steps
        .iter()
        .map(|s| s.h1_seminorm)
        .fold(0.0, f64::max);
    assert!(sup_h1.is_finite());
    println!(
        "ACCEPTANCE 12 PASS: H1(u_final) = {h1_u:.6} vs beta * H1(h) = {:.6} ({:.3}% apart), sup H1 = {sup_h1:.3}",
        params.beta * h1_h,
        100.0 * rel
    );
}

#[test]
fn criterion_13_finite_flow_length() {
    let (ssys, scost, sparams) = scalar_linear();
    let (hsys, hcost, hparams) = heisenberg(10.0);
    let traces = [
        run_flow(
            &ssys,
            &scost,
            &sparams,
            &Control::zeros(64, 1),
            &FlowConfig::default(),
        )
        .unwrap(),
        run_flow(
            &hsys,
            &hcost,
            &hparams,
            &loop_control(100, 0.5),
            &FlowConfig::default(),
        )
        .unwrap(),
    ];
    let mut worst = 0.0f64;
    for trace in &traces {
        assert!(trace.converged);
        let lengths: Vec<f64> = trace.accepted_steps().map(|s| s.cum_length).collect();
        let total = *lengths.last().unwrap();
        let cut = lengths.len() - lengths.len() / 10;
        let tail = total - lengths[cut - 1];
        let fraction = tail / total;
        assert!(fraction <= 0.01, "tail fraction {fraction:.4}");
        worst = worst.max(fraction);
    }
    println!(
        "ACCEPTANCE 13 PASS: final 10% of accepted steps carry {:.3}% of the flow length",
        100.0 * worst
    );
}
