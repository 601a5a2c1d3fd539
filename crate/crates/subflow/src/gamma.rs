//! Penalty continuation: solve a ladder of increasing `beta` values with
//! warm starts and report the limiting trends (nondecreasing totals,
//! vanishing end-point gap, strongly convergent minimizers).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig};
use crate::gradient::CostParams;
use crate::system::{ControlSystem, EndpointCost};
use crate::trajectory::{integrate_state, Control};

/// Increasing ladder of penalty weights with flow settings.
#[derive(Debug, Clone)]
pub struct BetaSchedule {
    pub betas: Vec<f64>,
    /// Initialize each level from the previous minimizer.
    pub warm_start: bool,
    pub base_flow: FlowConfig,
    /// Sparse per-level overrides of the base flow configuration.
    pub overrides: Vec<(usize, FlowConfig)>,
    /// Worker count for cold-started levels (warm starts are sequential).
    pub jobs: usize,
}

impl BetaSchedule {
    pub fn new(betas: Vec<f64>) -> Self {
        BetaSchedule {
            betas,
            warm_start: true,
            base_flow: FlowConfig::default(),
            overrides: Vec::new(),
            jobs: 1,
        }
    }

    fn flow_config_for(&self, idx: usize) -> FlowConfig {
        self.overrides
            .iter()
            .find(|(i, _)| *i == idx)
            .map(|(_, cfg)| cfg.clone())
            .unwrap_or_else(|| self.base_flow.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.betas.is_empty() {
            return Err(Error::validation("betas", "schedule must be nonempty"));
        }
        for w in self.betas.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(
                    "betas",
                    "schedule must be strictly increasing",
                ));
            }
        }
        if self.betas[0] <= 0.0 {
            return Err(Error::validation("betas", "weights must be positive"));
        }
        Ok(())
    }
}

/// Minimizer bookkeeping for one penalty level.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub beta: f64,
    pub minimizer: Control,
    pub half_norm: f64,
    pub endpoint_gap: f64,
    pub total: f64,
    pub residual: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Per-level results plus failures kept as messages so partial sweeps
/// remain usable.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<(f64, String)>,
    pub limit_energy_estimate: f64,
}

fn solve_row(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    beta: f64,
    u_init: &Control,
    cfg: &FlowConfig,
) -> Result<SweepRow> {
    let row_params = CostParams {
        beta,
        x0: params.x0.clone(),
        radius: params.radius,
    };
    let trace = run_flow(sys, cost_fn, &row_params, u_init, cfg)?;
    let u = trace.final_control.clone();
    let half_norm = 0.5 * u.l2_norm().powi(2);
    let traj = integrate_state(sys, &row_params.x0, &u)?;
    let endpoint_gap = cost_fn.value(traj.final_state());
    Ok(SweepRow {
        beta,
        half_norm,
        endpoint_gap,
        total: half_norm + beta * endpoint_gap,
        residual: trace.final_grad_norm(),
        steps: trace.accepted_steps().count().saturating_sub(1),
        converged: trace.converged,
        minimizer: u,
    })
}

/// Run the continuation over the schedule. Failed levels are recorded and
/// skipped; with warm starts the chain continues from the last success.
pub fn beta_sweep(
    sys: &ControlSystem,
    cost_fn: &EndpointCost,
    params: &CostParams,
    schedule: &BetaSchedule,
    u0: &Control,
) -> Result<SweepResult> {
    schedule.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();

    if schedule.warm_start || schedule.jobs <= 1 {
        let mut current = u0.clone();
        for (idx, &beta) in schedule.betas.iter().enumerate() {
            let cfg = schedule.flow_config_for(idx);
            let init = if schedule.warm_start { &current } else { u0 };
            match solve_row(sys, cost_fn, params, beta, init, &cfg) {
                Ok(row) => {
                    log::info!(
                        "beta {beta:.4e}: half-norm {:.8e}, gap {:.4e}, {} steps",
                        row.half_norm,
                        row.endpoint_gap,
                        row.steps
                    );
                    if schedule.warm_start {
                        current = row.minimizer.clone();
                    }
                    rows.push(row);
                }
                Err(e) => failures.push((beta, e.to_string())),
            }
        }
    } else {
        // Cold-started levels are independent; run them in bounded batches.
        let jobs = schedule.jobs.max(1);
        let n_levels = schedule.betas.len();
        let mut level_results: Vec<Option<std::result::Result<SweepRow, String>>> =
            (0..n_levels).map(|_| None).collect();
        for batch_start in (0..n_levels).step_by(jobs) {
            let batch_end = (batch_start + jobs).min(n_levels);
            let batch = &mut level_results[batch_start..batch_end];
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (offset, slot) in batch.iter_mut().enumerate() {
                    let idx = batch_start + offset;
                    let beta = schedule.betas[idx];
                    let cfg = schedule.flow_config_for(idx);
                    handles.push(scope.spawn(move || {
                        (
                            slot,
                            solve_row(sys, cost_fn, params, beta, u0, &cfg)
                                .map_err(|e| e.to_string()),
                        )
                    }));
                }
                for handle in handles {
                    let (slot, result) = handle.join().expect("sweep worker panicked");
                    *slot = Some(result);
                }
            });
        }
        for (idx, slot) in level_results.into_iter().enumerate() {
            match slot.expect("every level computed") {
                Ok(row) => rows.push(row),
                Err(msg) => failures.push((schedule.betas[idx], msg)),
            }
        }
    }

    let limit_energy_estimate = rows.last().map(|r| r.half_norm).unwrap_or(f64::NAN);
    Ok(SweepResult {
        rows,
        failures,
        limit_energy_estimate,
    })
}

/// Report-only flags for the continuation trends.
#[derive(Debug, Clone, Serialize)]
pub struct GammaTrends {
    /// Totals `F^beta(u_beta)` nondecreasing in `beta`.
    pub totals_nondecreasing: bool,
    /// End-point gaps strictly decreasing, halving at least per decade.
    pub gaps_decreasing: bool,
    /// Successive minimizer distances shrinking (strong-convergence trend).
    pub minimizer_distances_decreasing: bool,
    pub totals: Vec<f64>,
    pub gaps: Vec<f64>,
    pub minimizer_distances: Vec<f64>,
}

/// Evaluate the Gamma-limit trends on a sweep with at least two rows.
pub fn check_gamma_trends(result: &SweepResult) -> Result<GammaTrends> {
    let rows = &result.rows;
    if rows.len() < 2 {
        return Err(Error::InsufficientRows {
            found: rows.len(),
            needed: 2,
        });
    }
    let totals: Vec<f64> = rows.iter().map(|r| r.total).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.endpoint_gap).collect();
    let totals_nondecreasing = totals
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
    let gaps_decreasing = rows.windows(2).all(|w| {
        let strict = w[1].endpoint_gap < w[0].endpoint_gap;
        let decade = w[1].beta / w[0].beta >= 10.0 - 1e-9;
        let halved = !decade || w[1].endpoint_gap <= 0.5 * w[0].endpoint_gap;
        strict && halved
    });
    let minimizer_distances: Vec<f64> = rows
        .windows(2)
        .map(|w| w[1].minimizer.axpy(-1.0, &w[0].minimizer).l2_norm())
        .collect();
    let minimizer_distances_decreasing = minimizer_distances.windows(2).all(|w| w[1] <= w[0]);
    Ok(GammaTrends {
        totals_nondecreasing,
        gaps_decreasing,
        minimizer_distances_decreasing,
        totals,
        gaps,
        minimizer_distances,
    })
}

/// `||u_beta|| <= rho` per successful row.
pub fn radius_check(result: &SweepResult, rho: f64) -> Vec<bool> {
    assert!(rho > 0.0, "radius must be positive");
    result
        .rows
        .iter()
        .map(|r| r.minimizer.l2_norm() <= rho)
        .collect()
}
