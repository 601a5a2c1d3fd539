use nalgebra::DVector;
use subflow::gamma::{beta_sweep, BetaSchedule};
use subflow::gradient::{cost, gradient_discrete, CostParams};
use subflow::system::{make_heisenberg, make_quadratic_cost};
use subflow::trajectory::Control;

fn main() {
    let sys = make_heisenberg();
    let cost_fn = make_quadratic_cost(DVector::from_vec(vec![0.0, 0.0, 0.1]));
    let params = CostParams::new(10.0, DVector::zeros(3));
    let n_cells = 200;
    let u0 = Control::from_fn(n_cells, 2, |j, i| {
        let s = (j as f64 + 0.5) / n_cells as f64;
        let phase = 2.0 * std::f64::consts::PI * s;
        0.5 * if i == 0 { phase.cos() } else { phase.sin() }
    });
    let t0 = std::time::Instant::now();
    for _ in 0..200 { let _ = gradient_discrete(&sys, &cost_fn, &params, &u0).unwrap(); }
    println!("gradient: {:?}/call", t0.elapsed() / 200);
    let t0 = std::time::Instant::now();
    for _ in 0..200 { let _ = cost(&sys, &cost_fn, &params, &u0).unwrap(); }
    println!("cost:     {:?}/call", t0.elapsed() / 200);

    let t0 = std::time::Instant::now();
    let schedule = BetaSchedule::new(vec![1.0, 10.0, 100.0, 1000.0]);
    let result = beta_sweep(&sys, &cost_fn, &params, &schedule, &u0).unwrap();
    println!("sweep: {:?}", t0.elapsed());
    for row in &result.rows {
        println!("beta {:8.1}: half={:.6} gap={:.3e} steps={} conv={}",
            row.beta, row.half_norm, row.endpoint_gap, row.steps, row.converged);
    }
    println!("limit = {:.6} vs {:.6}", result.limit_energy_estimate, 2.0*std::f64::consts::PI*0.1);
}
