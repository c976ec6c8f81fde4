//! In-memory computations behind each figure preset. Writers live in
//! [`crate::runner`].

use rayon::prelude::*;
use stelab_core::fixed_point::{input_only_fixed_point, joint_fixed_point, FixedPointConfig, FixedPointReport};
use stelab_core::model::{make_quantizer, ModelConfig, TeacherSpec};
use stelab_core::ode::{integrate, OdeConfig, OdeState, TeacherMeasure};
use stelab_core::pde::{solve_pde, DensityGrid, PdeConfig, PdeSnapshot};
use stelab_core::quantizer::{build_grid, QuantizerSpec};
use stelab_core::simulator::{run_simulation, CoordinateHistogram, InitSpec, MacroState, SimConfig, SimOutput, Trajectory};
use stelab_core::Error as EngineError;

use crate::error::CliResult;
use crate::presets::{Curve, DensityFigure, InputOnlyFigure, JointFigure, Panel};

/// Simulation and ODE solution of one curve.
#[derive(Debug, Clone)]
pub struct CurveResult {
    pub panel: String,
    pub label: String,
    pub model: ModelConfig,
    pub ode: Vec<MacroState>,
    pub sim: Trajectory,
}

impl CurveResult {
    /// Largest |ε_sim − ε_ODE| over the shared τ grid, with the simulation
    /// standard error at that τ.
    pub fn sup_gap(&self) -> (f64, f64, f64) {
        let mut worst = (0.0, 0.0, 0.0);
        for (i, s) in self.sim.states.iter().enumerate() {
            if let Some(o) = self.ode.iter().find(|o| (o.tau - s.tau).abs() <= 1e-9 * s.tau.max(1.0)) {
                let gap = (s.eps_g - o.eps_g).abs();
                if gap > worst.0 || gap.is_nan() {
                    worst = (gap, s.tau, self.sim.eps_stderr(i));
                }
            }
        }
        worst
    }
}

pub fn curve_model(panel: &Panel, curve: &Curve) -> ModelConfig {
    ModelConfig {
        weight_quantizer: curve.weight,
        input_quantizer: curve.input,
        ridge: panel.ridge,
        learning_rate: panel.learning_rate,
    }
}

pub fn curve_sim_config(panel: &Panel, curve: &Curve, seed: u64) -> SimConfig {
    SimConfig {
        model: curve_model(panel, curve),
        teacher: TeacherSpec::all_ones(panel.dim),
        horizon_tau: panel.horizon_tau,
        record_stride_tau: panel.record_stride_tau,
        init: InitSpec::GaussianStd,
        runs: panel.runs,
        master_seed: seed,
        histogram_taus: Vec::new(),
        histogram_bins: None,
    }
}

pub fn curve_ode_config(panel: &Panel, curve: &Curve) -> OdeConfig {
    OdeConfig {
        model: curve_model(panel, curve),
        teacher_measure: TeacherMeasure::PointMass(1.0),
        noise_var: 0.0,
        step_dtau: panel.ode_dtau,
        horizon_tau: panel.horizon_tau,
        s_floor: 1e-10,
        record_stride_tau: panel.record_stride_tau,
        initial: OdeState { tau: 0.0, m: 0.0, q: 1.0 },
    }
}

pub fn run_curve(panel: &Panel, curve: &Curve, seed: u64) -> CliResult<CurveResult> {
    let ode = integrate(&curve_ode_config(panel, curve))?;
    let mut sim = run_simulation(&curve_sim_config(panel, curve, seed))?.trajectory;
    sim.label = format!("{}/{}", panel.name, curve.label);
    Ok(CurveResult {
        panel: panel.name.clone(),
        label: curve.label.clone(),
        model: curve_model(panel, curve),
        ode: ode.macro_states,
        sim,
    })
}

/// Every curve of a panel; curves run in parallel.
pub fn run_panel(panel: &Panel, seed: u64) -> CliResult<Vec<CurveResult>> {
    panel.curves.par_iter().map(|c| run_curve(panel, c, seed)).collect()
}

pub struct DensityResult {
    pub sim: SimOutput,
    pub pde: Vec<PdeSnapshot>,
}

fn density_model(fig: &DensityFigure) -> ModelConfig {
    ModelConfig {
        weight_quantizer: Some(fig.weight),
        input_quantizer: fig.input,
        ridge: fig.ridge,
        learning_rate: fig.learning_rate,
    }
}

pub fn density_sim_config(fig: &DensityFigure) -> SimConfig {
    let horizon = fig.taus.iter().copied().fold(0.0, f64::max);
    SimConfig {
        model: density_model(fig),
        teacher: TeacherSpec::all_ones(fig.dim),
        horizon_tau: horizon,
        record_stride_tau: 1.0_f64.min(horizon),
        init: InitSpec::GaussianStd,
        runs: fig.runs,
        master_seed: fig.seed,
        histogram_taus: fig.taus.clone(),
        histogram_bins: Some(fig.bins),
    }
}

pub fn density_pde_config(fig: &DensityFigure) -> PdeConfig {
    PdeConfig {
        model: density_model(fig),
        teacher_measure: TeacherMeasure::PointMass(1.0),
        noise_var: 0.0,
        drift_temperature: 0.0,
        dt: fig.pde_dt,
        horizon_tau: fig.taus.iter().copied().fold(0.0, f64::max),
        record_taus: fig.taus.clone(),
        w_min: None,
        w_max: None,
        cells: fig.pde_cells,
    }
}

pub fn run_densities(fig: &DensityFigure) -> CliResult<DensityResult> {
    let (sim, pde) = rayon::join(
        || run_simulation(&density_sim_config(fig)),
        || solve_pde(&density_pde_config(fig)),
    );
    Ok(DensityResult { sim: sim?, pde: pde? })
}

/// PDE density averaged over each histogram bin.
pub fn binned_density(grid: &DensityGrid, j: usize, edges: &[f64]) -> Vec<f64> {
    edges
        .windows(2)
        .map(|e| grid.mass_between(j, e[0], e[1]) / (e[1] - e[0]))
        .collect()
}

/// L1 distance between a histogram and the PDE density conditioned on the
/// same teacher value, over the histogram's bins.
pub fn histogram_l1(hist: &CoordinateHistogram, grid: &DensityGrid) -> Option<f64> {
    let j = grid
        .conditioning_values
        .iter()
        .position(|&v| (v - hist.conditioning_value).abs() < 1e-9)?;
    let pde = binned_density(grid, j, &hist.bin_edges);
    Some(
        hist.densities
            .iter()
            .zip(&pde)
            .zip(hist.bin_edges.windows(2))
            .map(|((h, p), e)| (h - p).abs() * (e[1] - e[0]))
            .sum(),
    )
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputOnlyRow {
    pub b_x: u32,
    pub omega_x: f64,
    pub kappa: f64,
    pub sigma_sq: f64,
    pub eta_boundary: f64,
    pub eta: f64,
    pub m_star: f64,
    pub q_star: f64,
    pub eps_g_star: f64,
    pub stability: String,
}

pub fn input_only_rows(fig: &InputOnlyFigure) -> CliResult<Vec<InputOnlyRow>> {
    let mut rows = Vec::with_capacity(fig.input_bits.len() * fig.ranges.len());
    for &b in &fig.input_bits {
        for &omega in &fig.ranges {
            let moments = build_grid(&QuantizerSpec::new(b, omega))?.moments_closed_form();
            let r = input_only_fixed_point(&moments, 1.0, fig.noise_var, fig.ridge, fig.learning_rate);
            rows.push(InputOnlyRow {
                b_x: b,
                omega_x: omega,
                kappa: moments.kappa,
                sigma_sq: moments.sigma_sq,
                eta_boundary: r.eta_boundary.unwrap_or(f64::NAN),
                eta: fig.learning_rate,
                m_star: r.m_star,
                q_star: r.q_star,
                eps_g_star: r.eps_g_star,
                stability: r.stability.to_string(),
            });
        }
    }
    Ok(rows)
}

/// Input-only closed form when the weights are not quantized, the joint
/// solver otherwise. Missing fixed points come back as `Ok(None)`.
pub fn solve_fixed_point(config: &FixedPointConfig, eta: f64) -> CliResult<Option<FixedPointReport>> {
    if config.model.weight_quantizer.is_none() {
        let moments = make_quantizer(config.model.input_quantizer.as_ref())?.moments();
        let rho = config.teacher_measure.second_moment();
        return Ok(Some(input_only_fixed_point(
            &moments,
            rho,
            config.noise_var,
            config.model.ridge,
            eta,
        )));
    }
    match joint_fixed_point(config, eta) {
        Ok(r) => Ok(Some(r)),
        Err(EngineError::NoFixedPointFound(_) | EngineError::NoInteriorSolution { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// One ε*(ω) curve of the joint figure.
#[derive(Debug, Clone)]
pub struct JointCurve {
    pub label: String,
    pub weight_bits: u32,
    pub input_bits: Option<u32>,
    pub points: Vec<(f64, Option<FixedPointReport>)>,
}

pub fn joint_config(fig: &JointFigure, weight: QuantizerSpec, input_bits: Option<u32>) -> FixedPointConfig {
    FixedPointConfig {
        model: ModelConfig {
            weight_quantizer: Some(weight),
            input_quantizer: input_bits.map(|b| QuantizerSpec::new(b, fig.input_range)),
            ridge: fig.ridge,
            learning_rate: fig.learning_rate,
        },
        teacher_measure: TeacherMeasure::PointMass(1.0),
        noise_var: fig.noise_var,
        threshold_sum: Default::default(),
        normalization: Default::default(),
        s_max: None,
    }
}

pub fn joint_label(weight_bits: u32, input_bits: Option<u32>) -> String {
    match input_bits {
        Some(bx) => format!("bw{weight_bits}_bx{bx}"),
        None => format!("bw{weight_bits}_no_input_quant"),
    }
}

pub fn joint_curves(fig: &JointFigure) -> CliResult<Vec<JointCurve>> {
    let mut inputs: Vec<Option<u32>> = fig.input_bits.iter().copied().map(Some).collect();
    if fig.include_unquantized_input {
        inputs.push(None);
    }
    let mut specs = Vec::new();
    for &bw in &fig.weight_bits {
        for &bx in &inputs {
            specs.push((bw, bx));
        }
    }
    specs
        .par_iter()
        .map(|&(bw, bx)| {
            let points = fig
                .ranges
                .iter()
                .map(|&omega| {
                    let cfg = joint_config(fig, QuantizerSpec::new(bw, omega), bx);
                    Ok((omega, solve_fixed_point(&cfg, fig.learning_rate)?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(JointCurve {
                label: joint_label(bw, bx),
                weight_bits: bw,
                input_bits: bx,
                points,
            })
        })
        .collect()
}

/// Long simulation at one grid point of the joint figure, with the fixed
/// point it should settle at.
#[derive(Debug, Clone)]
pub struct JointSimResult {
    pub weight_bits: u32,
    pub input_bits: u32,
    pub omega: f64,
    pub fixed_point: Option<FixedPointReport>,
    pub sim: Trajectory,
}

impl JointSimResult {
    pub fn terminal(&self) -> (f64, f64) {
        let i = self.sim.states.len() - 1;
        (self.sim.states[i].eps_g, self.sim.eps_stderr(i))
    }
}

pub fn joint_sim_config(fig: &JointFigure, weight_bits: u32, input_bits: u32, omega: f64) -> SimConfig {
    let s = &fig.simulation;
    SimConfig {
        model: joint_config(fig, QuantizerSpec::new(weight_bits, omega), Some(input_bits)).model,
        teacher: TeacherSpec::all_ones(s.dim),
        horizon_tau: s.horizon_tau,
        record_stride_tau: s.record_stride_tau,
        init: InitSpec::GaussianStd,
        runs: s.runs,
        master_seed: fig.seed,
        histogram_taus: Vec::new(),
        histogram_bins: None,
    }
}

pub fn joint_simulations(fig: &JointFigure) -> CliResult<Vec<JointSimResult>> {
    let s = &fig.simulation;
    let mut points = Vec::new();
    for &bw in &s.weight_bits {
        for &bx in &s.input_bits {
            for &omega in &s.ranges {
                points.push((bw, bx, omega));
            }
        }
    }
    points
        .par_iter()
        .map(|&(bw, bx, omega)| {
            let fp = solve_fixed_point(&joint_config(fig, QuantizerSpec::new(bw, omega), Some(bx)), fig.learning_rate)?;
            let mut sim = run_simulation(&joint_sim_config(fig, bw, bx, omega))?.trajectory;
            sim.label = format!("{}_omega{omega}", joint_label(bw, Some(bx)));
            Ok(JointSimResult {
                weight_bits: bw,
                input_bits: bx,
                omega,
                fixed_point: fp,
                sim,
            })
        })
        .collect()
}

/// True when some interior grid value lies strictly below both ends of
/// the finite part of the curve.
pub fn has_interior_minimum(values: &[f64]) -> bool {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 3 {
        return false;
    }
    let (first, last) = (finite[0], finite[finite.len() - 1]);
    let (i_min, v_min) = finite
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    i_min > 0 && i_min + 1 < finite.len() && v_min < first && v_min < last
}
