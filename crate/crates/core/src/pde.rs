//! Finite-volume solver for the self-consistent Fokker–Planck equation
//!
//!   ∂μ/∂τ = −∂_w[a(w; w*) μ] + D(τ) ∂²_w μ,
//!   a = η(κ w* − (σ_x² + λ) ψ_T(w)),   D = (η²/2) σ_x² ε_g(τ),
//!
//! where ε_g is evaluated from the current density. One conditional density
//! is evolved per teacher value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generalization_error, make_quantizer, ModelConfig};
use crate::ode::TeacherMeasure;
use crate::quantizer::{Quantizer, QuantizerMoments};
use crate::simulator::MacroState;
use crate::special::norm_cdf;

/// Cell-averaged conditional densities μ(w | w*) on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub tau: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub cells: usize,
    pub cell_width: f64,
    pub conditioning_values: Vec<f64>,
    pub conditioning_weights: Vec<f64>,
    /// One row of `cells` densities per conditioning value.
    pub density: Vec<Vec<f64>>,
    /// Total mass removed by clipping tiny negative values.
    pub clamped_mass: f64,
}

impl DensityGrid {
    /// Discretized N(mean, var) initial condition, identical for every
    /// conditioning value; tails beyond the domain are dropped and the
    /// result renormalized.
    pub fn gaussian(
        w_min: f64,
        w_max: f64,
        cells: usize,
        measure: &TeacherMeasure,
        mean: f64,
        var: f64,
    ) -> Result<Self> {
        if !(w_max > w_min && cells >= 2) {
            return Err(Error::InvalidParameter("density grid needs w_max > w_min and >= 2 cells".into()));
        }
        if !(var > 0.0) {
            return Err(Error::InvalidParameter("initial variance must be positive".into()));
        }
        let h = (w_max - w_min) / cells as f64;
        let sd = var.sqrt();
        let mut row: Vec<f64> = (0..cells)
            .map(|i| {
                let lo = w_min + i as f64 * h;
                norm_cdf((lo + h - mean) / sd) - norm_cdf((lo - mean) / sd)
            })
            .collect();
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total * h;
        }
        let (values, weights) = measure_nodes(measure);
        Ok(Self {
            tau: 0.0,
            w_min,
            w_max,
            cells,
            cell_width: h,
            density: vec![row; values.len()],
            conditioning_values: values,
            conditioning_weights: weights,
            clamped_mass: 0.0,
        })
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells)
            .map(|i| self.w_min + (i as f64 + 0.5) * self.cell_width)
            .collect()
    }

    /// ∫ μ(w | w*_j) dw for every conditioning value.
    pub fn masses(&self) -> Vec<f64> {
        self.density
            .iter()
            .map(|row| row.iter().sum::<f64>() * self.cell_width)
            .collect()
    }

    /// Mean of each conditional density.
    pub fn means(&self) -> Vec<f64> {
        let c = self.centers();
        self.density
            .iter()
            .map(|row| row.iter().zip(&c).map(|(p, w)| p * w).sum::<f64>() * self.cell_width)
            .collect()
    }

    /// Mass of the `j`-th conditional density inside [a, b), assuming the
    /// density is constant within each cell.
    pub fn mass_between(&self, j: usize, a: f64, b: f64) -> f64 {
        let h = self.cell_width;
        self.density[j]
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let lo = self.w_min + i as f64 * h;
                let overlap = (b.min(lo + h) - a.max(lo)).max(0.0);
                p * overlap
            })
            .sum()
    }
}

fn measure_nodes(measure: &TeacherMeasure) -> (Vec<f64>, Vec<f64>) {
    match measure {
        TeacherMeasure::PointMass(v) => (vec![*v], vec![1.0]),
        TeacherMeasure::Nodes { values, weights } => (values.clone(), weights.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub model: ModelConfig,
    pub teacher_measure: TeacherMeasure,
    #[serde(default)]
    pub noise_var: f64,
    /// Temperature of ψ_T in the drift; 0 uses the hard quantizer.
    #[serde(default)]
    pub drift_temperature: f64,
    pub dt: f64,
    pub horizon_tau: f64,
    pub record_taus: Vec<f64>,
    /// Domain defaults to [−ω_w − 4, ω_w + 4].
    #[serde(default)]
    pub w_min: Option<f64>,
    #[serde(default)]
    pub w_max: Option<f64>,
    #[serde(default = "default_cells")]
    pub cells: usize,
}

fn default_cells() -> usize {
    400
}

impl PdeConfig {
    pub fn domain(&self) -> (f64, f64) {
        let omega = self.model.weight_quantizer.map_or(1.0, |q| q.range);
        (self.w_min.unwrap_or(-omega - 4.0), self.w_max.unwrap_or(omega + 4.0))
    }
}

/// Constants of the PDE coefficients.
#[derive(Debug, Clone)]
pub struct PdeSystem {
    /// Weight quantizer at the drift temperature.
    pub psi: Quantizer,
    pub moments_x: QuantizerMoments,
    pub eta: f64,
    pub ridge: f64,
    pub noise_var: f64,
}

impl PdeSystem {
    pub fn new(model: &ModelConfig, noise_var: f64, drift_temperature: f64) -> Result<Self> {
        model.validate()?;
        let spec = model.weight_quantizer.map(|q| q.with_temperature(drift_temperature));
        let input_q = make_quantizer(model.input_quantizer.as_ref())?;
        Ok(Self {
            psi: make_quantizer(spec.as_ref())?,
            moments_x: input_q.moments(),
            eta: model.learning_rate,
            ridge: model.ridge,
            noise_var,
        })
    }

    /// Macroscopic state of a density, by cell-midpoint quadrature.
    pub fn observables(&self, grid: &DensityGrid) -> MacroState {
        let h = grid.cell_width;
        let centers = grid.centers();
        let psi: Vec<f64> = centers.iter().map(|&w| self.psi.apply(w)).collect();
        let (mut m, mut q, mut m_psi, mut q_psi, mut r_psi, mut rho) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for ((row, &ws), &pw) in grid
            .density
            .iter()
            .zip(&grid.conditioning_values)
            .zip(&grid.conditioning_weights)
        {
            rho += pw * ws * ws;
            for i in 0..grid.cells {
                let mass = pw * row[i] * h;
                let (w, p) = (centers[i], psi[i]);
                m += mass * ws * w;
                q += mass * w * w;
                m_psi += mass * ws * p;
                q_psi += mass * p * p;
                r_psi += mass * p * w;
            }
        }
        MacroState {
            tau: grid.tau,
            m,
            q,
            s: (q - m * m / rho).max(0.0).sqrt(),
            m_psi,
            q_psi,
            r_psi,
            eps_g: generalization_error(&self.moments_x, m_psi, q_psi, rho, self.noise_var),
        }
    }
}

/// Drift per conditioning value and cell, the diffusion coefficient, and the
/// macroscopic state they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeCoefficients {
    pub drift: Vec<Vec<f64>>,
    pub diffusion: f64,
    pub state: MacroState,
}

pub fn pde_coefficients(grid: &DensityGrid, sys: &PdeSystem) -> PdeCoefficients {
    let state = sys.observables(grid);
    let QuantizerMoments { kappa, sigma_sq } = sys.moments_x;
    let gain = sigma_sq + sys.ridge;
    let psi: Vec<f64> = grid.centers().iter().map(|&w| sys.psi.apply(w)).collect();
    let drift = grid
        .conditioning_values
        .iter()
        .map(|&ws| psi.iter().map(|&p| sys.eta * (kappa * ws - gain * p)).collect())
        .collect();
    // ε_g cannot be negative analytically; cell quadrature may undershoot.
    let diffusion = 0.5 * sys.eta * sys.eta * sigma_sq * state.eps_g.max(0.0);
    PdeCoefficients {
        drift,
        diffusion,
        state,
    }
}

/// Largest stable explicit step for the given coefficients.
pub fn max_stable_dt(drift: &[Vec<f64>], diffusion: f64, h: f64) -> f64 {
    let amax = drift
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let rate = amax / h + 2.0 * diffusion / (h * h);
    if rate == 0.0 {
        f64::INFINITY
    } else {
        1.0 / rate
    }
}

/// One explicit finite-volume step with frozen coefficients: upwind
/// advective flux, central diffusive flux, no flux through the ends.
pub fn step_with_coefficients(grid: &DensityGrid, drift: &[Vec<f64>], diffusion: f64, dt: f64) -> Result<DensityGrid> {
    let h = grid.cell_width;
    let limit = max_stable_dt(drift, diffusion, h);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::CflError { suggested_dt: 0.9 * limit });
    }
    let n = grid.cells;
    let rows: Vec<(Vec<f64>, f64)> = grid
        .density
        .par_iter()
        .zip(drift.par_iter())
        .map(|(rho, a)| {
            let mut flux = vec![0.0; n + 1];
            for i in 0..n - 1 {
                flux[i + 1] = a[i].max(0.0) * rho[i] + a[i + 1].min(0.0) * rho[i + 1]
                    - diffusion * (rho[i + 1] - rho[i]) / h;
            }
            let mut clamped = 0.0;
            let out = (0..n)
                .map(|i| {
                    let v = rho[i] - dt / h * (flux[i + 1] - flux[i]);
                    if v < 0.0 {
                        clamped -= v * h;
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            (out, clamped)
        })
        .collect();
    let mut next = grid.clone();
    next.tau = grid.tau + dt;
    next.density = Vec::with_capacity(rows.len());
    for (row, c) in rows {
        next.density.push(row);
        next.clamped_mass += c;
    }
    Ok(next)
}

/// One step with coefficients evaluated from `grid` itself.
pub fn pde_step(grid: &DensityGrid, sys: &PdeSystem, dt: f64) -> Result<DensityGrid> {
    let c = pde_coefficients(grid, sys);
    step_with_coefficients(grid, &c.drift, c.diffusion, dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeSnapshot {
    pub density: DensityGrid,
    pub state: MacroState,
}

/// Evolve a standard-normal initial density and return snapshots at the
/// requested times (rounded to the nearest step).
pub fn solve_pde(config: &PdeConfig) -> Result<Vec<PdeSnapshot>> {
    if !(config.dt > 0.0 && config.horizon_tau > 0.0) {
        return Err(Error::InvalidParameter("dt and horizon must be positive".into()));
    }
    config.teacher_measure.validate()?;
    let sys = PdeSystem::new(&config.model, config.noise_var, config.drift_temperature)?;
    let (lo, hi) = config.domain();
    let mut grid = DensityGrid::gaussian(lo, hi, config.cells, &config.teacher_measure, 0.0, 1.0)?;
    let total = (config.horizon_tau / config.dt).round() as u64;
    let mut record: Vec<u64> = config
        .record_taus
        .iter()
        .map(|t| (t / config.dt).round() as u64)
        .filter(|&k| k <= total)
        .collect();
    record.sort_unstable();
    record.dedup();
    let mut out = Vec::with_capacity(record.len());
    let mut next = 0;
    let mut step = 0u64;
    loop {
        if next < record.len() && record[next] == step {
            out.push(PdeSnapshot {
                state: sys.observables(&grid),
                density: grid.clone(),
            });
            next += 1;
        }
        if step == total || next == record.len() {
            break;
        }
        let tau = (step + 1) as f64 * config.dt;
        grid = pde_step(&grid, &sys, config.dt)?;
        grid.tau = tau;
        step += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::QuantizerSpec;

    fn point_grid(cells: usize) -> DensityGrid {
        DensityGrid::gaussian(-5.0, 5.0, cells, &TeacherMeasure::PointMass(1.0), 0.0, 1.0).unwrap()
    }

    #[test]
    fn initial_density_is_normalized() {
        let g = point_grid(400);
        assert!((g.masses()[0] - 1.0).abs() < 1e-12);
        assert!(g.means()[0].abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_leave_density_unchanged() {
        let g = point_grid(100);
        let drift = vec![vec![0.0; 100]];
        let next = step_with_coefficients(&g, &drift, 0.0, 1.0).unwrap();
        assert_eq!(next.density, g.density);
    }

    #[test]
    fn pure_diffusion_variance_growth() {
        let n = 401;
        let mut g = point_grid(n);
        g.density[0] = vec![0.0; n];
        g.density[0][n / 2] = 1.0 / g.cell_width;
        let d = 0.01;
        let h = g.cell_width;
        let dt = 0.4 * h * h / (2.0 * d);
        let drift = vec![vec![0.0; n]];
        let var = |g: &DensityGrid| {
            let c = g.centers();
            let mean = g.means()[0];
            g.density[0].iter().zip(&c).map(|(p, w)| p * (w - mean).powi(2)).sum::<f64>() * h
        };
        let v0 = var(&g);
        let steps = 500;
        for _ in 0..steps {
            g = step_with_coefficients(&g, &drift, d, dt).unwrap();
        }
        let grown = var(&g) - v0;
        let expect = 2.0 * d * dt * steps as f64;
        assert!((grown / expect - 1.0).abs() < 1e-9, "{grown} vs {expect}");
    }

    #[test]
    fn cfl_violation_suggests_smaller_step() {
        let g = point_grid(100);
        let drift = vec![vec![1.0; 100]];
        let h = g.cell_width;
        match step_with_coefficients(&g, &drift, 0.5, 10.0) {
            Err(Error::CflError { suggested_dt }) => {
                assert!(suggested_dt < 1.0 / (1.0 / h + 1.0 / (h * h)));
                assert!(step_with_coefficients(&g, &drift, 0.5, suggested_dt).is_ok());
            }
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    fn fig1_model() -> ModelConfig {
        ModelConfig {
            weight_quantizer: Some(QuantizerSpec::new(2, 2.0)),
            input_quantizer: Some(QuantizerSpec::new(2, 2.0)),
            ridge: 1.0,
            learning_rate: 0.05,
        }
    }

    #[test]
    fn symmetric_start_has_zero_teacher_overlap() {
        let sys = PdeSystem::new(&fig1_model(), 0.0, 0.0).unwrap();
        let g = DensityGrid::gaussian(-6.0, 6.0, 400, &TeacherMeasure::PointMass(1.0), 0.0, 1.0).unwrap();
        let c = pde_coefficients(&g, &sys);
        assert!(c.state.m_psi.abs() < 1e-14);
        let mx = sys.moments_x;
        assert!((c.state.eps_g - (mx.sigma_sq * c.state.q_psi + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn recovered_teacher_has_no_diffusion() {
        let model = ModelConfig {
            weight_quantizer: None,
            input_quantizer: None,
            ridge: 0.0,
            learning_rate: 0.1,
        };
        let sys = PdeSystem::new(&model, 0.0, 0.0).unwrap();
        // 41 cells on [0.5, 1.5]: the middle cell is centered on 1.
        let mut g = DensityGrid::gaussian(0.5, 1.5, 41, &TeacherMeasure::PointMass(1.0), 1.0, 0.01).unwrap();
        g.density[0] = vec![0.0; 41];
        g.density[0][20] = 1.0 / g.cell_width;
        let c = pde_coefficients(&g, &sys);
        assert!(c.state.eps_g.abs() < 1e-12);
        assert!(c.diffusion.abs() < 1e-14);
    }

    #[test]
    fn eps_matches_direct_summation() {
        let sys = PdeSystem::new(&fig1_model(), 0.2, 0.0).unwrap();
        let meas = TeacherMeasure::rademacher(1.0);
        let mut g = DensityGrid::gaussian(-6.0, 6.0, 120, &meas, 0.0, 1.0).unwrap();
        // Arbitrary positive densities.
        let mut seed = 12345u64;
        for row in g.density.iter_mut() {
            for v in row.iter_mut() {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = (seed >> 11) as f64 / (1u64 << 53) as f64;
            }
            let s: f64 = row.iter().sum::<f64>() * 0.1;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let st = sys.observables(&g);
        let (mut mp, mut qp) = (0.0, 0.0);
        for (j, ws) in [-1.0, 1.0].iter().enumerate() {
            for (i, w) in g.centers().iter().enumerate() {
                let p = if *w >= 1.0 { 2.0 } else if *w >= -1.0 { 0.0 } else { -2.0 };
                let mass = 0.5 * g.density[j][i] * g.cell_width;
                mp += mass * ws * p;
                qp += mass * p * p;
            }
        }
        let mx = sys.moments_x;
        let expect = mx.sigma_sq * qp - 2.0 * mx.kappa * mp + 1.0 + 0.2;
        assert!((st.eps_g - expect).abs() < 1e-12);
    }

    #[test]
    fn mass_conserved_over_many_steps() {
        let sys = PdeSystem::new(&fig1_model(), 0.0, 0.0).unwrap();
        let mut g = DensityGrid::gaussian(-6.0, 6.0, 400, &TeacherMeasure::PointMass(1.0), 0.0, 1.0).unwrap();
        for _ in 0..10_000 {
            g = pde_step(&g, &sys, 0.02).unwrap();
        }
        assert!((g.masses()[0] - 1.0).abs() < 1e-8);
        assert!(g.density[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn snapshots_start_at_initial_condition() {
        let cfg = PdeConfig {
            model: fig1_model(),
            teacher_measure: TeacherMeasure::PointMass(1.0),
            noise_var: 0.0,
            drift_temperature: 0.0,
            dt: 0.05,
            horizon_tau: 1.0,
            record_taus: vec![0.0, 1.0],
            w_min: None,
            w_max: None,
            cells: 400,
        };
        let snaps = solve_pde(&cfg).unwrap();
        assert_eq!(snaps.len(), 2);
        let g0 = DensityGrid::gaussian(-6.0, 6.0, 400, &TeacherMeasure::PointMass(1.0), 0.0, 1.0).unwrap();
        assert_eq!(snaps[0].density.density, g0.density);
        assert!((snaps[1].density.tau - 1.0).abs() < 1e-12);
        assert!(snaps[1].density.means()[0] > 0.0);
    }
}
