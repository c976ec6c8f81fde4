//! CSV schemas shared by all subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stelab_core::fixed_point::FixedPointReport;
use stelab_core::pde::PdeSnapshot;
use stelab_core::simulator::{CoordinateHistogram, MacroState, Trajectory};
use stelab_core::Error as EngineError;

use crate::error::{CliError, CliResult};

pub const TRAJECTORY_HEADER: [&str; 9] = ["tau", "m", "q", "s", "m_psi", "q_psi", "r_psi", "eps_g", "eps_g_stderr"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub tau: f64,
    pub m: f64,
    pub q: f64,
    pub s: f64,
    pub m_psi: f64,
    pub q_psi: f64,
    pub r_psi: f64,
    pub eps_g: f64,
    pub eps_g_stderr: f64,
}

impl TrajectoryRow {
    pub fn new(st: &MacroState, stderr: f64) -> Self {
        Self {
            tau: st.tau,
            m: st.m,
            q: st.q,
            s: st.s,
            m_psi: st.m_psi,
            q_psi: st.q_psi,
            r_psi: st.r_psi,
            eps_g: st.eps_g,
            eps_g_stderr: stderr,
        }
    }
}

/// Rows of a trajectory; the standard error is 0 for single runs and for
/// deterministic engines.
pub fn trajectory_rows(traj: &Trajectory) -> Vec<TrajectoryRow> {
    traj.states
        .iter()
        .enumerate()
        .map(|(i, st)| TrajectoryRow::new(st, traj.stderr.as_ref().map_or(0.0, |se| se[i].eps_g)))
        .collect()
}

pub fn state_rows(states: &[MacroState]) -> Vec<TrajectoryRow> {
    states.iter().map(|st| TrajectoryRow::new(st, 0.0)).collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header-only files still carry the schema.
pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> CliResult<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TRAJECTORY_HEADER)?;
        w.flush()?;
        return Ok(());
    }
    write_rows(path, rows)
}

pub fn read_trajectory(path: &Path) -> CliResult<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRAJECTORY_HEADER {
        return Err(EngineError::SchemaError(format!(
            "{}: expected header {}, found {}",
            path.display(),
            TRAJECTORY_HEADER.join(","),
            header.join(",")
        ))
        .into());
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: TrajectoryRow =
            rec.map_err(|e| CliError::from(EngineError::SchemaError(format!("{}: {e}", path.display()))))?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub tau: f64,
    pub w_star: f64,
    pub bin_left: f64,
    pub bin_right: f64,
    pub density: f64,
}

pub fn histogram_rows(hists: &[CoordinateHistogram]) -> Vec<HistogramRow> {
    let mut rows = Vec::new();
    for h in hists {
        for (i, &density) in h.densities.iter().enumerate() {
            rows.push(HistogramRow {
                tau: h.tau,
                w_star: h.conditioning_value,
                bin_left: h.bin_edges[i],
                bin_right: h.bin_edges[i + 1],
                density,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub tau: f64,
    pub w_star: f64,
    pub cell_center: f64,
    pub density: f64,
}

pub fn density_rows(snapshots: &[PdeSnapshot]) -> Vec<DensityRow> {
    let mut rows = Vec::new();
    for snap in snapshots {
        let g = &snap.density;
        let centers = g.centers();
        for (j, &w_star) in g.conditioning_values.iter().enumerate() {
            for (c, &density) in centers.iter().zip(&g.density[j]) {
                rows.push(DensityRow {
                    tau: g.tau,
                    w_star,
                    cell_center: *c,
                    density,
                });
            }
        }
    }
    rows
}

/// One fixed-point solve. Identity quantizers leave their bit width and
/// range empty; a missing fixed point leaves NaN in the state columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub b_w: Option<u32>,
    pub omega_w: Option<f64>,
    pub b_x: Option<u32>,
    pub omega_x: Option<f64>,
    pub eta: f64,
    pub lambda: f64,
    pub m_star: f64,
    pub s_star: f64,
    pub q_star: f64,
    pub eps_g_star: f64,
    pub stability: String,
    pub eta_boundary: Option<f64>,
}

impl SweepRow {
    pub fn new(label: &str, model: &stelab_core::model::ModelConfig, report: Option<&FixedPointReport>) -> Self {
        let get = |f: fn(&FixedPointReport) -> f64| report.map_or(f64::NAN, f);
        Self {
            label: label.to_owned(),
            b_w: model.weight_quantizer.map(|q| q.bits),
            omega_w: model.weight_quantizer.map(|q| q.range),
            b_x: model.input_quantizer.map(|q| q.bits),
            omega_x: model.input_quantizer.map(|q| q.range),
            eta: model.learning_rate,
            lambda: model.ridge,
            m_star: get(|r| r.m_star),
            s_star: get(|r| r.s_star),
            q_star: get(|r| r.q_star),
            eps_g_star: get(|r| r.eps_g_star),
            stability: report.map_or_else(|| "none".to_owned(), |r| r.stability.to_string()),
            eta_boundary: report.and_then(|r| r.eta_boundary),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trip_keeps_header_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            TrajectoryRow::new(&MacroState { tau: 0.0, eps_g: 1.5, ..Default::default() }, 0.0),
            TrajectoryRow::new(&MacroState { tau: 0.1, m: 0.3, q: 1.0 / 3.0, eps_g: 1.2, ..Default::default() }, 0.01),
        ];
        write_trajectory(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER.join(","));
        assert_eq!(read_trajectory(&path).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "tau,eps\n0,1\n").unwrap();
        let err = read_trajectory(&path).unwrap_err();
        assert!(matches!(err, CliError::Engine(EngineError::SchemaError(_))));
        assert_eq!(err.exit_code(), 4);
    }
}
