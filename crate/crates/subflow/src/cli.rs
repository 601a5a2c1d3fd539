//! Config ingestion and subcommand execution.
//!
//! Experiments are JSON documents rather than flag soups so a run can be
//! reproduced from the config file alone; command-line flags only choose the
//! subcommand, output directory, and worker count.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig, FlowScheme};
use crate::gamma::{beta_sweep, check_gamma_trends, BetaSchedule};
use crate::gradient::{
    cost, gradient_continuous, gradient_discrete, CostParams, GradientMode,
};
use crate::oracle::fd_gradient;
use crate::output;
use crate::second_order::{spectrum_probe, HessianOperator};
use crate::system::{load_system, make_quadratic_cost, ControlSystem, EndpointCost, SystemSpec};
use crate::trajectory::{
    integrate_adjoint, integrate_fundamental, integrate_state, Control,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlowConfig {
    dt0: Option<f64>,
    scheme: Option<String>,
    eps_stop: Option<f64>,
    t_max: Option<f64>,
    backtrack_factor: Option<f64>,
    max_rejects: Option<usize>,
    gradient_mode: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(rename = "type")]
    kind: String,
    target: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawInitialControl {
    Zero,
    Constant { value: Vec<f64> },
    /// Circular loop in the first two control components.
    Loop {
        amplitude: f64,
        #[serde(default = "default_turns")]
        turns: f64,
    },
    Random { scale: f64 },
}

fn default_turns() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: SystemSpec,
    x0: Vec<f64>,
    cost: RawCost,
    grid_n: Option<usize>,
    beta: Option<f64>,
    beta_schedule: Option<Vec<f64>>,
    flow: Option<RawFlowConfig>,
    u0: Option<RawInitialControl>,
    radius: Option<f64>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    warm_start: Option<bool>,
    jobs: Option<usize>,
    hessian_probes: Option<usize>,
}

/// Fully validated run configuration with defaults applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: ControlSystem,
    pub x0: DVector<f64>,
    pub cost_fn: EndpointCost,
    pub grid_n: usize,
    pub beta: Option<f64>,
    pub beta_schedule: Option<Vec<f64>>,
    pub flow: FlowConfig,
    pub u0: Control,
    pub radius: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub warm_start: bool,
    pub jobs: usize,
    pub hessian_probes: Option<usize>,
}

impl RunConfig {
    fn params(&self, beta: f64) -> CostParams {
        CostParams {
            beta,
            x0: self.x0.clone(),
            radius: self.radius,
        }
    }

    fn require_beta(&self) -> Result<f64> {
        self.beta
            .ok_or_else(|| Error::validation("beta", "this subcommand needs a scalar beta"))
    }
}

fn parse_flow(raw: Option<RawFlowConfig>) -> Result<FlowConfig> {
    let mut cfg = FlowConfig::default();
    let Some(raw) = raw else {
        return Ok(cfg);
    };
    if let Some(dt0) = raw.dt0 {
        if dt0 <= 0.0 || !dt0.is_finite() {
            return Err(Error::validation("flow.dt0", "must be positive"));
        }
        cfg.dt0 = dt0;
    }
    if let Some(eps) = raw.eps_stop {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::validation("flow.eps_stop", "must be positive"));
        }
        cfg.eps_stop = eps;
    }
    if let Some(t_max) = raw.t_max {
        if t_max <= 0.0 {
            return Err(Error::validation("flow.t_max", "must be positive"));
        }
        cfg.t_max = t_max;
    }
    if let Some(bf) = raw.backtrack_factor {
        if !(0.0..1.0).contains(&bf) || bf == 0.0 {
            return Err(Error::validation(
                "flow.backtrack_factor",
                "must lie strictly between 0 and 1",
            ));
        }
        cfg.backtrack_factor = bf;
    }
    if let Some(mr) = raw.max_rejects {
        cfg.max_rejects = mr;
    }
    if let Some(scheme) = raw.scheme {
        cfg.scheme = match scheme.as_str() {
            "explicit-euler" => FlowScheme::ExplicitEuler,
            "exponential-euler" => FlowScheme::ExponentialEuler,
            _ => {
                return Err(Error::validation(
                    "flow.scheme",
                    "expected explicit-euler or exponential-euler",
                ))
            }
        };
    }
    if let Some(mode) = raw.gradient_mode {
        cfg.gradient_mode = match mode.as_str() {
            "discrete-adjoint" => GradientMode::DiscreteAdjoint,
            "continuous-adjoint" => GradientMode::ContinuousAdjoint,
            _ => {
                return Err(Error::validation(
                    "flow.gradient_mode",
                    "expected discrete-adjoint or continuous-adjoint",
                ))
            }
        };
    }
    Ok(cfg)
}

fn build_u0(
    raw: Option<RawInitialControl>,
    grid_n: usize,
    k: usize,
    seed: u64,
) -> Result<Control> {
    match raw.unwrap_or(RawInitialControl::Zero) {
        RawInitialControl::Zero => Ok(Control::zeros(grid_n, k)),
        RawInitialControl::Constant { value } => {
            if value.len() != k {
                return Err(Error::validation(
                    "u0.value",
                    format!("expected {k} components, got {}", value.len()),
                ));
            }
            Ok(Control::constant(grid_n, &DVector::from_vec(value)))
        }
        RawInitialControl::Loop { amplitude, turns } => {
            if k < 2 {
                return Err(Error::validation(
                    "u0",
                    "loop initialization needs control dimension >= 2",
                ));
            }
            if !amplitude.is_finite() {
                return Err(Error::validation("u0.amplitude", "must be finite"));
            }
            Ok(Control::from_fn(grid_n, k, |j, i| {
                let s = (j as f64 + 0.5) / grid_n as f64;
                let phase = 2.0 * std::f64::consts::PI * turns * s;
                match i {
                    0 => amplitude * phase.cos(),
                    1 => amplitude * phase.sin(),
                    _ => 0.0,
                }
            }))
        }
        RawInitialControl::Random { scale } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::validation("u0.scale", "must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Control::from_fn(grid_n, k, |_, _| {
                rng.gen_range(-scale..scale)
            }))
        }
    }
}

/// Parse and validate a JSON config document, filling defaults
/// (`grid_n = 100`, `dt0 = 0.1`, `eps_stop = 1e-6`, `t_max = 1e4`).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;

    let system = load_system(&raw.system)?;
    let n = system.state_dim();
    let k = system.control_dim();

    if raw.x0.len() != n {
        return Err(Error::validation(
            "x0",
            format!("expected {n} components, got {}", raw.x0.len()),
        ));
    }
    let x0 = DVector::from_vec(raw.x0);

    if raw.cost.kind != "quadratic" {
        return Err(Error::validation("cost.type", "only quadratic is supported"));
    }
    if raw.cost.target.len() != n {
        return Err(Error::validation(
            "cost.target",
            format!("expected {n} components, got {}", raw.cost.target.len()),
        ));
    }
    let cost_fn = make_quadratic_cost(DVector::from_vec(raw.cost.target));

    let grid_n = raw.grid_n.unwrap_or(100);
    if grid_n < 2 {
        return Err(Error::validation("grid_n", "must be at least 2"));
    }

    if let Some(beta) = raw.beta {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::validation("beta", "must be positive"));
        }
    }
    if let Some(schedule) = &raw.beta_schedule {
        if schedule.is_empty() {
            return Err(Error::validation("beta_schedule", "must be nonempty"));
        }
        if schedule[0] <= 0.0 || schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "beta_schedule",
                "must be strictly increasing and positive",
            ));
        }
    }
    if raw.beta.is_none() && raw.beta_schedule.is_none() {
        return Err(Error::validation(
            "beta",
            "either beta or beta_schedule is required",
        ));
    }
    if let Some(radius) = raw.radius {
        if radius <= 0.0 {
            return Err(Error::validation("radius", "must be positive"));
        }
    }

    let seed = raw.seed.unwrap_or(0);
    let flow = parse_flow(raw.flow)?;
    let u0 = build_u0(raw.u0, grid_n, k, seed)?;
    if let Some(m) = raw.hessian_probes {
        if m == 0 || m > grid_n * k {
            return Err(Error::validation(
                "hessian_probes",
                format!("must be between 1 and N*k = {}", grid_n * k),
            ));
        }
    }

    Ok(RunConfig {
        system,
        x0,
        cost_fn,
        grid_n,
        beta: raw.beta,
        beta_schedule: raw.beta_schedule,
        flow,
        u0,
        radius: raw.radius,
        output_dir: raw.output_dir,
        seed,
        warm_start: raw.warm_start.unwrap_or(true),
        jobs: raw.jobs.unwrap_or(1),
        hessian_probes: raw.hessian_probes,
    })
}

/// Supported subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Flow,
    Sweep,
    Hessian,
    Verify,
}

/// Execute a subcommand, writing outputs into `out_dir`. Returns the list of
/// emitted files.
pub fn run_command(
    cmd: Command,
    cfg: &RunConfig,
    out_dir: &Path,
    jobs_override: Option<usize>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut emitted = Vec::new();
    match cmd {
        Command::Simulate => {
            let beta = cfg.beta.unwrap_or(1.0);
            let traj = integrate_state(&cfg.system, &cfg.params(beta).x0, &cfg.u0)?;
            let path = out_dir.join("trajectory.csv");
            output::write_trajectory_csv(&path, &traj)?;
            emitted.push(path);
        }
        Command::Flow => {
            let beta = cfg.require_beta()?;
            let params = cfg.params(beta);
            let trace = run_flow(&cfg.system, &cfg.cost_fn, &params, &cfg.u0, &cfg.flow)?;
            let trace_path = out_dir.join("trace.csv");
            output::write_trace_csv(&trace_path, &trace)?;
            let control_path = out_dir.join("final_control.csv");
            output::write_control_csv(&control_path, &trace.final_control)?;

            let traj = integrate_state(&cfg.system, &params.x0, &trace.final_control)?;
            let gap = cfg.cost_fn.value(traj.final_state());
            let half_norm = 0.5 * trace.final_control.l2_norm().powi(2);
            let summary = json!({
                "final_energy": trace.final_energy(),
                "converged": trace.converged,
                "residual": trace.final_grad_norm(),
                "steps": trace.accepted_steps().count() - 1,
                "half_norm": half_norm,
                "endpoint_gap": gap,
            });
            let summary_path = out_dir.join("summary.json");
            output::write_json(&summary_path, &summary)?;
            emitted.extend([trace_path, control_path, summary_path]);
        }
        Command::Sweep => {
            let betas = cfg.beta_schedule.clone().ok_or_else(|| {
                Error::validation("beta_schedule", "the sweep subcommand needs a schedule")
            })?;
            let mut schedule = BetaSchedule::new(betas);
            schedule.warm_start = cfg.warm_start;
            schedule.base_flow = cfg.flow.clone();
            schedule.jobs = jobs_override.unwrap_or(cfg.jobs);
            let params = cfg.params(schedule.betas[0]);
            let result = beta_sweep(&cfg.system, &cfg.cost_fn, &params, &schedule, &cfg.u0)?;
            let sweep_path = out_dir.join("sweep.csv");
            output::write_sweep_csv(&sweep_path, &result)?;
            let trends_value = match check_gamma_trends(&result) {
                Ok(trends) => serde_json::to_value(&trends)
                    .map_err(|e| Error::Parse(e.to_string()))?,
                Err(e) => json!({ "error": e.to_string() }),
            };
            let trends_path = out_dir.join("trends.json");
            output::write_json(&trends_path, &trends_value)?;
            emitted.extend([sweep_path, trends_path]);
        }
        Command::Hessian => {
            let beta = cfg.require_beta()?;
            let params = cfg.params(beta);
            let op = HessianOperator::new(&cfg.system, &cfg.cost_fn, &params, &cfg.u0)?;
            let m = cfg
                .hessian_probes
                .unwrap_or_else(|| 10.min(cfg.grid_n * cfg.system.control_dim()));
            let probe = spectrum_probe(&op, m)?;

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let k = cfg.system.control_dim();
            let mut sym_residual = 0.0f64;
            for _ in 0..5 {
                let v = Control::from_fn(cfg.grid_n, k, |_, _| rng.gen_range(-1.0..1.0));
                let w = Control::from_fn(cfg.grid_n, k, |_, _| rng.gen_range(-1.0..1.0));
                let lhs = op.apply(&v).inner(&w);
                let rhs = op.apply(&w).inner(&v);
                sym_residual =
                    sym_residual.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
            }
            let value = json!({
                "eigenvalues": probe.eigenvalues,
                "compact_eigenvalues": probe.compact_eigenvalues,
                "symmetric_residual": sym_residual,
                "iterations": probe.iterations,
            });
            let path = out_dir.join("hessian.json");
            output::write_json(&path, &value)?;
            emitted.push(path);
        }
        Command::Verify => {
            let report = run_verification(cfg)?;
            let path = out_dir.join("verify.json");
            output::write_json(&path, &report)?;
            emitted.push(path);
        }
    }
    Ok(emitted)
}

/// Oracle battery for the configured system: derivative checks, the
/// fundamental-matrix identity, adjoint duality, gradient-vs-FD agreement,
/// and the small-step dissipation rate.
fn run_verification(cfg: &RunConfig) -> Result<serde_json::Value> {
    let sys = &cfg.system;
    let n = sys.state_dim();
    let k = sys.control_dim();
    let beta = cfg.beta.unwrap_or(1.0);
    let params = cfg.params(beta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        checks.push(json!({ "check": name, "pass": pass, "detail": detail }));
    };

    // Analytic Jacobians and Hessians against central differences.
    let step = 1e-5;
    let mut worst_jac = 0.0f64;
    let mut worst_sym = 0.0f64;
    for _ in 0..20 {
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        for i in 0..k {
            let exact = sys.jacobian_eval(&x, i);
            for p in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[p] += step;
                xm[p] -= step;
                let fd = (sys.field_column(&xp, i) - sys.field_column(&xm, i)) / (2.0 * step);
                for c in 0..n {
                    worst_jac = worst_jac
                        .max((exact[(c, p)] - fd[c]).abs() / exact[(c, p)].abs().max(1.0));
                }
            }
            for h in sys.hessian_eval(&x, i) {
                worst_sym = worst_sym.max((&h - h.transpose()).norm());
            }
        }
    }
    push(
        "jacobian_fd",
        worst_jac <= 1e-5,
        format!("max relative error {worst_jac:.3e}"),
    );
    push(
        "hessian_symmetry",
        worst_sym <= 1e-12,
        format!("max asymmetry {worst_sym:.3e}"),
    );

    // End-point cost gradient against finite differences.
    let mut worst_cost_grad = 0.0f64;
    for _ in 0..20 {
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let g = cfg.cost_fn.gradient(&x);
        for p in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[p] += step;
            xm[p] -= step;
            let fd = (cfg.cost_fn.value(&xp) - cfg.cost_fn.value(&xm)) / (2.0 * step);
            worst_cost_grad = worst_cost_grad.max((g[p] - fd).abs() / g[p].abs().max(1.0));
        }
    }
    push(
        "cost_gradient_fd",
        worst_cost_grad <= 1e-5,
        format!("max relative error {worst_cost_grad:.3e}"),
    );

    // Fundamental identity and adjoint duality on a random control.
    let u = Control::from_fn(cfg.grid_n, k, |_, _| rng.gen_range(-1.0..1.0));
    let traj = integrate_state(sys, &params.x0, &u)?;
    let fm = integrate_fundamental(sys, &traj, &u)?;
    let identity = nalgebra::DMatrix::identity(n, n);
    let max_defect = (0..=cfg.grid_n)
        .map(|j| (&fm.m[j] * &fm.n_inv[j] - &identity).norm())
        .fold(0.0, f64::max);
    push(
        "fundamental_identity",
        max_defect <= 1e-8,
        format!("max Frobenius defect {max_defect:.3e}"),
    );

    let terminal = cfg.cost_fn.gradient(traj.final_state());
    let path = integrate_adjoint(sys, &traj, &u, &terminal)?;
    let m_final = fm.m.last().unwrap();
    let max_dual = (0..=cfg.grid_n)
        .map(|j| {
            let reference = (&fm.n_inv[j]).transpose() * (m_final.transpose() * &terminal);
            (&path.lambda[j] - reference).norm()
        })
        .fold(0.0, f64::max);
    push(
        "adjoint_duality",
        max_dual <= 1e-7,
        format!("max node defect {max_dual:.3e}"),
    );

    // Discrete gradient against the finite-difference oracle.
    let rep = gradient_discrete(sys, &cfg.cost_fn, &params, &u)?;
    let fd = fd_gradient(sys, &cfg.cost_fn, &params, &u, 1e-5)?;
    let rel = fd.axpy(-1.0, &rep.g_full).l2_norm() / rep.g_full.l2_norm().max(1e-12);
    push(
        "gradient_vs_fd",
        rel <= 1e-6,
        format!("relative L2 error {rel:.3e}"),
    );

    // Both gradient modes agree to discretization accuracy.
    let rep_c = gradient_continuous(sys, &cfg.cost_fn, &params, &u)?;
    let gap = rep_c.g_full.axpy(-1.0, &rep.g_full).l2_norm();
    let mode_tol = 100.0 / (cfg.grid_n as f64 * cfg.grid_n as f64);
    push(
        "gradient_mode_consistency",
        gap <= mode_tol,
        format!("L2 gap {gap:.3e} (tolerance {mode_tol:.3e})"),
    );

    // Small-step dissipation rate.
    let f0 = cost(sys, &cfg.cost_fn, &params, &u)?;
    let dt = 1e-3;
    let stepped = u.axpy(-dt, &rep.g_full);
    let f1 = cost(sys, &cfg.cost_fn, &params, &stepped)?;
    let expected = rep.g_full.l2_norm().powi(2);
    let rate = (f0 - f1) / dt;
    let rate_ok = expected == 0.0 || (rate - expected).abs() <= 0.1 * expected;
    push(
        "dissipation_rate",
        rate_ok,
        format!("rate {rate:.6e} vs gradient norm squared {expected:.6e}"),
    );

    let all_passed = checks.iter().all(|c| c["pass"].as_bool() == Some(true));
    Ok(json!({ "all_passed": all_passed, "checks": checks }))
}
