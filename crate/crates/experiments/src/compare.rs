//! Pointwise comparison of two ε_g(τ) trajectories.

use serde::{Deserialize, Serialize};
use stelab_core::Error as EngineError;

use crate::csvio::TrajectoryRow;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Absolute floor of the per-τ tolerance.
    pub abs_tol: f64,
    /// Multiplier on the combined standard error of both files.
    pub stderr_factor: f64,
    /// Interpolate the second file onto the first file's τ grid.
    pub interpolate: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            abs_tol: 0.05,
            stderr_factor: 3.0,
            interpolate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub tau: f64,
    pub eps_g_a: f64,
    pub eps_g_b: f64,
    pub diff: f64,
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub points: Vec<ComparePoint>,
    pub sup_diff: f64,
    pub sup_tau: f64,
    /// First τ at which the difference exceeds its tolerance.
    pub first_failure_tau: Option<f64>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.first_failure_tau.is_none()
    }
}

fn same_tau(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// Linear interpolation of (eps_g, stderr) of `rows` at `tau`; `None`
/// outside the covered range.
fn interpolate(rows: &[TrajectoryRow], tau: f64) -> Option<(f64, f64)> {
    let first = rows.first()?;
    let last = rows.last()?;
    if tau < first.tau - 1e-12 || tau > last.tau + 1e-12 {
        return None;
    }
    let i = rows.partition_point(|r| r.tau < tau);
    if i < rows.len() && same_tau(rows[i].tau, tau) {
        return Some((rows[i].eps_g, rows[i].eps_g_stderr));
    }
    let (lo, hi) = (&rows[i.saturating_sub(1)], &rows[i.min(rows.len() - 1)]);
    let w = if hi.tau > lo.tau { (tau - lo.tau) / (hi.tau - lo.tau) } else { 0.0 };
    Some((
        lo.eps_g + w * (hi.eps_g - lo.eps_g),
        lo.eps_g_stderr + w * (hi.eps_g_stderr - lo.eps_g_stderr),
    ))
}

pub fn compare(a: &[TrajectoryRow], b: &[TrajectoryRow], opts: &CompareOptions) -> CliResult<CompareReport> {
    let aligned = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same_tau(x.tau, y.tau));
    let pairs: Vec<(f64, f64, f64, f64, f64)> = if aligned {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.tau, x.eps_g, x.eps_g_stderr, y.eps_g, y.eps_g_stderr))
            .collect()
    } else if opts.interpolate {
        a.iter()
            .filter_map(|x| interpolate(b, x.tau).map(|(e, se)| (x.tau, x.eps_g, x.eps_g_stderr, e, se)))
            .collect()
    } else {
        return Err(EngineError::SchemaError(format!(
            "tau grids differ ({} vs {} rows); pass --interpolate to resample",
            a.len(),
            b.len()
        ))
        .into());
    };
    if pairs.is_empty() {
        return Err(EngineError::SchemaError("no overlapping tau values".into()).into());
    }
    let mut report = CompareReport {
        points: Vec::with_capacity(pairs.len()),
        sup_diff: 0.0,
        sup_tau: pairs[0].0,
        first_failure_tau: None,
    };
    for (tau, ea, sa, eb, sb) in pairs {
        let diff = (ea - eb).abs();
        let allowed = (opts.stderr_factor * (sa * sa + sb * sb).sqrt()).max(opts.abs_tol);
        // NaN differences fail.
        if !(diff <= allowed) && report.first_failure_tau.is_none() {
            report.first_failure_tau = Some(tau);
        }
        if diff > report.sup_diff || diff.is_nan() {
            report.sup_diff = diff;
            report.sup_tau = tau;
        }
        report.points.push(ComparePoint {
            tau,
            eps_g_a: ea,
            eps_g_b: eb,
            diff,
            allowed,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(taus: &[f64], eps: impl Fn(f64) -> f64, se: f64) -> Vec<TrajectoryRow> {
        taus.iter()
            .map(|&tau| TrajectoryRow {
                tau,
                m: 0.0,
                q: 0.0,
                s: 0.0,
                m_psi: 0.0,
                q_psi: 0.0,
                r_psi: 0.0,
                eps_g: eps(tau),
                eps_g_stderr: se,
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_sup_difference() {
        let a = rows(&[0.0, 1.0, 2.0], |t| 1.0 / (1.0 + t), 0.0);
        let r = compare(&a, &a, &CompareOptions::default()).unwrap();
        assert_eq!(r.sup_diff, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn reports_first_tau_beyond_tolerance() {
        let taus = [0.0, 1.0, 2.0, 3.0];
        let a = rows(&taus, |t| t, 0.0);
        let b = rows(&taus, |t| if t >= 2.0 { t + 0.2 } else { t + 0.01 }, 0.0);
        let r = compare(&a, &b, &CompareOptions::default()).unwrap();
        assert_eq!(r.first_failure_tau, Some(2.0));
        assert!((r.sup_diff - 0.2).abs() < 1e-12);
    }

    #[test]
    fn standard_error_widens_the_tolerance() {
        let taus = [0.0, 1.0];
        let a = rows(&taus, |_| 1.0, 0.04);
        let b = rows(&taus, |_| 1.1, 0.0);
        assert!(compare(&a, &b, &CompareOptions::default()).unwrap().passed());
    }

    #[test]
    fn mismatched_grids_need_interpolation() {
        let a = rows(&[0.0, 1.0, 2.0], |t| 2.0 * t, 0.0);
        let b = rows(&[0.0, 2.0], |t| 2.0 * t, 0.0);
        assert!(compare(&a, &b, &CompareOptions::default()).is_err());
        let opts = CompareOptions {
            interpolate: true,
            ..Default::default()
        };
        let r = compare(&a, &b, &opts).unwrap();
        assert_eq!(r.points.len(), 3);
        assert!(r.sup_diff < 1e-12);
    }

    #[test]
    fn nan_is_a_failure() {
        let a = rows(&[0.0], |_| f64::NAN, 0.0);
        let b = rows(&[0.0], |_| 0.0, 0.0);
        assert!(!compare(&a, &b, &CompareOptions::default()).unwrap().passed());
    }
}
