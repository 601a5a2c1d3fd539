//! CSV and JSON emission. Floats are printed with 17 significant digits so
//! double-precision values round-trip exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::flow::FlowTrace;
use crate::gamma::SweepResult;
use crate::trajectory::{Control, Trajectory};

/// 17 significant digits: enough to reconstruct any f64 bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = traj.nodes[0].len();
    let header: Vec<String> = std::iter::once("s".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let n_cells = traj.grid_size();
    for (j, node) in traj.nodes.iter().enumerate() {
        let mut fields = vec![fmt_f64(j as f64 / n_cells as f64)];
        fields.extend(node.iter().map(|&v| fmt_f64(v)));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &FlowTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,energy,grad_norm,dt,accepted,cum_length,h1")?;
    for s in &trace.steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt_f64(s.t),
            fmt_f64(s.energy),
            fmt_f64(s.grad_norm),
            fmt_f64(s.step_size),
            u8::from(s.accepted),
            fmt_f64(s.cum_length),
            fmt_f64(s.h1_seminorm),
        )?;
    }
    Ok(())
}

pub fn write_control_csv(path: &Path, u: &Control) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("s".to_string())
        .chain((1..=u.dim()).map(|i| format!("u{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let n_cells = u.grid_size();
    for j in 0..n_cells {
        let mut fields = vec![fmt_f64(j as f64 / n_cells as f64)];
        fields.extend((0..u.dim()).map(|i| fmt_f64(u.values()[(j, i)])));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "beta,half_norm,endpoint_gap,total,residual,steps")?;
    for r in &result.rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(r.beta),
            fmt_f64(r.half_norm),
            fmt_f64(r.endpoint_gap),
            fmt_f64(r.total),
            fmt_f64(r.residual),
            r.steps,
        )?;
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| crate::error::Error::Parse(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 6.283185307179586, 1e-300, 2.5e17] {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
