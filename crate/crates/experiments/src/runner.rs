//! Executes a resolved [`ExperimentConfig`]: engine calls, CSV and SVG
//! outputs, and the manifest, which is written last.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use stelab_core::fixed_point::FixedPointReport;
use stelab_core::ode::{integrate, OdeConfig, OdeSystem};
use stelab_core::pde::solve_pde;
use stelab_core::simulator::{run_simulation, MacroState, SimConfig, Trajectory};
use stelab_core::Error as EngineError;
use toml::Value;

use crate::config::{with_field, ExperimentConfig, FixedPointJob, Kind, SweepEngine, SweepJob};
use crate::csvio::{
    density_rows, histogram_rows, state_rows, trajectory_rows, write_rows, write_trajectory, SweepRow, TrajectoryRow,
};
use crate::error::{CliError, CliResult};
use crate::figures::{self, CurveResult};
use crate::manifest::{ManifestBuilder, RunManifest, RunStatus};
use crate::plot::{chart, Series};
use crate::presets::{self, DensityFigure, InputOnlyFigure, JointFigure, Preset, TrajectoryFigure};

/// Output directory plus the list of files written so far.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    plot: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path, plot: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            plot,
            files: Vec::new(),
        }
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn trajectory(&mut self, name: &str, rows: &[TrajectoryRow]) -> CliResult<()> {
        let p = self.path(name);
        write_trajectory(&p, rows)
    }

    pub fn rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let p = self.path(name);
        write_rows(&p, rows)
    }

    pub fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(p, text)?;
        Ok(())
    }

    /// No-op unless plotting is enabled.
    pub fn chart(&mut self, name: &str, title: &str, x: &str, y: &str, series: &[Series]) -> CliResult<()> {
        if !self.plot {
            return Ok(());
        }
        let p = self.path(name);
        chart(&p, title, x, y, series)
    }
}

fn eps_line(label: &str, states: &[MacroState]) -> Series {
    Series::line(label, states.iter().map(|s| (s.tau, s.eps_g)))
}

fn eps_markers(label: &str, traj: &Trajectory) -> Series {
    Series::markers(
        label,
        traj.states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.tau, s.eps_g, traj.eps_stderr(i))),
    )
}

/// Run `cfg` and write its artifacts. Engine failures still produce a
/// manifest listing whatever was written before the error.
pub fn run(cfg: &ExperimentConfig, command: Vec<String>) -> CliResult<RunManifest> {
    let preset_seed = cfg
        .reproduce
        .as_ref()
        .filter(|_| cfg.kind == Some(Kind::Reproduce))
        .and_then(|job| presets::resolve(job.figure, &job.overrides, cfg.seed).ok())
        .and_then(|p| p.seed());
    let seed = cfg
        .seed
        .or(preset_seed)
        .or(cfg.simulate.as_ref().map(|s| s.master_seed));
    let builder = ManifestBuilder::start(command, seed, cfg);
    let mut out = Outputs::new(&cfg.out, cfg.plot);
    let result = out
        .text("config.toml", &cfg.to_toml()?)
        .and_then(|_| with_pool(cfg.threads, || dispatch(cfg, &mut out)));
    let (status, message) = match &result {
        Ok(()) => (RunStatus::Ok, None),
        Err(e) if e.is_divergence() => (RunStatus::Diverged, Some(e.to_string())),
        Err(e) => (RunStatus::Failed, Some(e.to_string())),
    };
    let manifest = builder.finish(&cfg.out, out.files(), status, message)?;
    result.map(|_| manifest)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn dispatch(cfg: &ExperimentConfig, out: &mut Outputs) -> CliResult<()> {
    let missing = |t: &str| CliError::Config(format!("missing [{t}] table"));
    match cfg.kind.ok_or_else(|| CliError::Config("no experiment kind given".into()))? {
        Kind::Simulate => simulate(cfg.simulate.as_ref().ok_or_else(|| missing("simulate"))?, out),
        Kind::Ode => ode(cfg.ode.as_ref().ok_or_else(|| missing("ode"))?, out),
        Kind::Pde => {
            let pde = cfg.pde.as_ref().ok_or_else(|| missing("pde"))?;
            let snaps = solve_pde(pde)?;
            out.rows("density.csv", &density_rows(&snaps))?;
            let states: Vec<MacroState> = snaps.iter().map(|s| s.state).collect();
            out.trajectory("trajectory.csv", &state_rows(&states))?;
            let series: Vec<Series> = snaps
                .iter()
                .flat_map(|s| {
                    let g = &s.density;
                    let c = g.centers();
                    g.conditioning_values.iter().enumerate().map(move |(j, v)| {
                        Series::line(
                            format!("tau={} w*={v:.3}", g.tau),
                            c.iter().copied().zip(g.density[j].iter().copied()),
                        )
                    }).collect::<Vec<_>>()
                })
                .collect();
            out.chart("density.svg", "PDE density", "w", "density", &series)
        }
        Kind::FixedPoint => fixed_point(cfg.fixed_point.as_ref().ok_or_else(|| missing("fixed_point"))?, out),
        Kind::Sweep => sweep(cfg, cfg.sweep.as_ref().ok_or_else(|| missing("sweep"))?, out),
        Kind::Reproduce => {
            let job = cfg.reproduce.as_ref().ok_or_else(|| missing("reproduce"))?;
            match presets::resolve(job.figure, &job.overrides, cfg.seed)? {
                Preset::Trajectories(f) => reproduce_trajectories(&f, out),
                Preset::Densities(f) => reproduce_densities(&f, out),
                Preset::InputOnly(f) => reproduce_input_only(&f, out),
                Preset::Joint(f) => reproduce_joint(&f, out),
            }
        }
    }
}

/// Write a simulation trajectory, including the partial one carried by a
/// divergence error, then pass the error on.
fn write_sim(out: &mut Outputs, name: &str, result: stelab_core::Result<Trajectory>) -> CliResult<Trajectory> {
    match result {
        Ok(t) => {
            out.trajectory(name, &trajectory_rows(&t))?;
            Ok(t)
        }
        Err(EngineError::Divergence { step, tau, partial }) => {
            out.trajectory(name, &trajectory_rows(&partial))?;
            Err(EngineError::Divergence { step, tau, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn simulate(sim: &SimConfig, out: &mut Outputs) -> CliResult<()> {
    let res = run_simulation(sim);
    let (traj, hists) = match res {
        Ok(o) => (Ok(o.trajectory), o.histograms),
        Err(e) => (Err(e), Vec::new()),
    };
    let traj = write_sim(out, "trajectory.csv", traj)?;
    if !hists.is_empty() {
        out.rows("histograms.csv", &histogram_rows(&hists))?;
    }
    out.chart("eps_g.svg", "simulation", "tau", "eps_g", &[eps_markers("simulation", &traj)])
}

fn write_ode(out: &mut Outputs, name: &str, cfg: &OdeConfig, result: stelab_core::Result<Vec<MacroState>>) -> CliResult<Vec<MacroState>> {
    match result {
        Ok(states) => {
            out.trajectory(name, &state_rows(&states))?;
            Ok(states)
        }
        Err(EngineError::OdeDivergence { tau, partial }) => {
            let sys = OdeSystem::from_config(cfg)?;
            let states: Vec<MacroState> = partial.iter().map(|s| sys.observables(s.tau, s.m, s.q)).collect();
            out.trajectory(name, &state_rows(&states))?;
            Err(EngineError::OdeDivergence { tau, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn ode(cfg: &OdeConfig, out: &mut Outputs) -> CliResult<()> {
    let states = write_ode(out, "trajectory.csv", cfg, integrate(cfg).map(|s| s.macro_states))?;
    out.chart("eps_g.svg", "ODE", "tau", "eps_g", &[eps_line("ode", &states)])
}

fn fixed_point_rows(job: &FixedPointJob, label: &str) -> CliResult<Vec<SweepRow>> {
    job.etas
        .iter()
        .map(|&eta| {
            let report = figures::solve_fixed_point(&job.problem, eta)?;
            let mut model = job.problem.model.clone();
            model.learning_rate = eta;
            Ok(SweepRow::new(label, &model, report.as_ref()))
        })
        .collect()
}

fn fixed_point(job: &FixedPointJob, out: &mut Outputs) -> CliResult<()> {
    let rows = fixed_point_rows(job, "")?;
    out.rows("fixed_points.csv", &rows)?;
    out.chart(
        "fixed_points.svg",
        "fixed point",
        "eta",
        "eps_g*",
        &[Series::markers("eps_g*", rows.iter().map(|r| (r.eta, r.eps_g_star, 0.0)))],
    )
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Serialize)]
struct SweepPointRow {
    point: usize,
    value: String,
    file: String,
    tau: f64,
    eps_g: f64,
    eps_g_stderr: f64,
}

fn sweep(cfg: &ExperimentConfig, job: &SweepJob, out: &mut Outputs) -> CliResult<()> {
    match job.engine {
        SweepEngine::FixedPoint => {
            let base = cfg.fixed_point.as_ref().ok_or_else(|| CliError::Config("missing [fixed_point]".into()))?;
            let jobs = job
                .values
                .iter()
                .map(|v| with_field(base, &job.parameter, v))
                .collect::<CliResult<Vec<_>>>()?;
            let rows: Vec<Vec<SweepRow>> = jobs
                .par_iter()
                .zip(&job.values)
                .map(|(j, v)| fixed_point_rows(j, &value_label(v)))
                .collect::<CliResult<_>>()?;
            let rows: Vec<SweepRow> = rows.into_iter().flatten().collect();
            out.rows("sweep.csv", &rows)
        }
        SweepEngine::Simulate | SweepEngine::Ode => {
            let results: Vec<CliResult<Vec<TrajectoryRow>>> = job
                .values
                .par_iter()
                .enumerate()
                .map(|(i, v)| sweep_point(cfg, job, &sweep_file(i), v))
                .collect();
            let mut summary = Vec::new();
            let mut series = Vec::new();
            let mut first_err = None;
            for (i, (v, r)) in job.values.iter().zip(results).enumerate() {
                let file = sweep_file(i);
                if cfg.out.join(&file).exists() {
                    out.files.push(cfg.out.join(&file));
                }
                let rows = match r {
                    Ok(rows) => rows,
                    Err(e) => {
                        first_err.get_or_insert(e);
                        continue;
                    }
                };
                let Some(last) = rows.last() else { continue };
                summary.push(SweepPointRow {
                    point: i,
                    value: value_label(v),
                    file,
                    tau: last.tau,
                    eps_g: last.eps_g,
                    eps_g_stderr: last.eps_g_stderr,
                });
                series.push(Series::markers(
                    format!("{}={}", job.parameter, value_label(v)),
                    rows.iter().map(|r| (r.tau, r.eps_g, r.eps_g_stderr)),
                ));
            }
            out.rows("sweep.csv", &summary)?;
            out.chart("sweep.svg", &job.parameter, "tau", "eps_g", &series)?;
            first_err.map_or(Ok(()), Err)
        }
    }
}

fn sweep_file(i: usize) -> String {
    format!("sweep_{i:03}.csv")
}

/// One sweep point. Workers write their own trajectory file, also on
/// divergence.
fn sweep_point(cfg: &ExperimentConfig, job: &SweepJob, file: &str, v: &Value) -> CliResult<Vec<TrajectoryRow>> {
    let mut local = Outputs::new(&cfg.out, false);
    match job.engine {
        SweepEngine::Simulate => {
            let base = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("missing [simulate]".into()))?;
            let sim: SimConfig = with_field(base, &job.parameter, v)?;
            sim.validate()?;
            let t = write_sim(&mut local, file, run_simulation(&sim).map(|o| o.trajectory))?;
            Ok(trajectory_rows(&t))
        }
        SweepEngine::Ode => {
            let base = cfg.ode.as_ref().ok_or_else(|| CliError::Config("missing [ode]".into()))?;
            let oc: OdeConfig = with_field(base, &job.parameter, v)?;
            Ok(state_rows(&write_ode(&mut local, file, &oc, integrate(&oc).map(|s| s.macro_states))?))
        }
        SweepEngine::FixedPoint => unreachable!("fixed-point sweeps are handled in bulk"),
    }
}

#[derive(Debug, Serialize)]
struct CurveSummaryRow {
    panel: String,
    label: String,
    final_tau: f64,
    eps_g_sim: f64,
    eps_g_sim_stderr: f64,
    eps_g_ode: f64,
    sup_gap: f64,
    sup_gap_tau: f64,
}

fn curve_summary(c: &CurveResult) -> CurveSummaryRow {
    let i = c.sim.states.len() - 1;
    let (gap, tau, _) = c.sup_gap();
    CurveSummaryRow {
        panel: c.panel.clone(),
        label: c.label.clone(),
        final_tau: c.sim.states[i].tau,
        eps_g_sim: c.sim.states[i].eps_g,
        eps_g_sim_stderr: c.sim.eps_stderr(i),
        eps_g_ode: c.ode.last().map_or(f64::NAN, |s| s.eps_g),
        sup_gap: gap,
        sup_gap_tau: tau,
    }
}

fn reproduce_trajectories(fig: &TrajectoryFigure, out: &mut Outputs) -> CliResult<()> {
    let mut summary = Vec::new();
    for panel in &fig.panels {
        let curves = figures::run_panel(panel, fig.seed)?;
        let mut series = Vec::new();
        for c in &curves {
            out.trajectory(&format!("{}_{}_ode.csv", c.panel, c.label), &state_rows(&c.ode))?;
            out.trajectory(&format!("{}_{}_sim.csv", c.panel, c.label), &trajectory_rows(&c.sim))?;
            series.push(eps_line(&format!("{} ODE", c.label), &c.ode));
            series.push(eps_markers(&format!("{} sim", c.label), &c.sim));
            summary.push(curve_summary(c));
        }
        out.chart(&format!("{}.svg", panel.name), &panel.name, "tau", "eps_g", &series)?;
    }
    out.rows("summary.csv", &summary)
}

#[derive(Debug, Serialize)]
struct DensitySummaryRow {
    tau: f64,
    w_star: f64,
    l1: f64,
    histogram_mean: f64,
    pde_mean: f64,
    outside_fraction: f64,
}

fn reproduce_densities(fig: &DensityFigure, out: &mut Outputs) -> CliResult<()> {
    let res = figures::run_densities(fig)?;
    out.rows("histograms.csv", &histogram_rows(&res.sim.histograms))?;
    out.rows("density.csv", &density_rows(&res.pde))?;
    out.trajectory("sim_trajectory.csv", &trajectory_rows(&res.sim.trajectory))?;
    let pde_states: Vec<MacroState> = res.pde.iter().map(|s| s.state).collect();
    out.trajectory("pde_trajectory.csv", &state_rows(&pde_states))?;
    let mut summary = Vec::new();
    for h in &res.sim.histograms {
        let Some(snap) = res.pde.iter().find(|s| (s.density.tau - h.tau).abs() < 1e-9 * h.tau.max(1.0)) else {
            continue;
        };
        let g = &snap.density;
        let j = g.conditioning_values.iter().position(|&v| (v - h.conditioning_value).abs() < 1e-9);
        summary.push(DensitySummaryRow {
            tau: h.tau,
            w_star: h.conditioning_value,
            l1: figures::histogram_l1(h, g).unwrap_or(f64::NAN),
            histogram_mean: h.mean(),
            pde_mean: j.map_or(f64::NAN, |j| g.means()[j]),
            outside_fraction: h.outside_fraction,
        });
        if let Some(j) = j {
            let centers: Vec<f64> = h.bin_edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
            let series = [
                Series::markers("histogram", centers.iter().zip(&h.densities).map(|(&x, &y)| (x, y, 0.0))),
                Series::line("PDE", g.centers().into_iter().zip(g.density[j].iter().copied())),
            ];
            out.chart(&format!("density_tau{}.svg", h.tau), &format!("tau = {}", h.tau), "w", "density", &series)?;
        }
    }
    out.rows("summary.csv", &summary)
}

fn reproduce_input_only(fig: &InputOnlyFigure, out: &mut Outputs) -> CliResult<()> {
    let rows = figures::input_only_rows(fig)?;
    out.rows("input_only.csv", &rows)?;
    let by_bits = |f: fn(&figures::InputOnlyRow) -> f64| -> Vec<Series> {
        fig.input_bits
            .iter()
            .map(|&b| {
                Series::line(
                    format!("b_x={b}"),
                    rows.iter().filter(|r| r.b_x == b).map(|r| (r.omega_x, f(r))),
                )
            })
            .collect()
    };
    out.chart(
        "stability_boundary.svg",
        "largest stable learning rate",
        "omega_x",
        "eta",
        &by_bits(|r| r.eta_boundary),
    )?;
    out.chart("eps_g_star.svg", "steady-state error", "omega_x", "eps_g*", &by_bits(|r| r.eps_g_star))
}

#[derive(Debug, Serialize)]
struct JointSimRow {
    b_w: u32,
    b_x: u32,
    omega_w: f64,
    file: String,
    tau: f64,
    eps_g_sim: f64,
    eps_g_sim_stderr: f64,
    eps_g_star: f64,
}

fn reproduce_joint(fig: &JointFigure, out: &mut Outputs) -> CliResult<()> {
    let curves = figures::joint_curves(fig)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for c in &curves {
        for (omega, report) in &c.points {
            let cfg = figures::joint_config(fig, stelab_core::quantizer::QuantizerSpec::new(c.weight_bits, *omega), c.input_bits);
            rows.push(SweepRow::new(&c.label, &cfg.model, report.as_ref()));
        }
        series.push(Series::line(
            c.label.clone(),
            c.points
                .iter()
                .map(|(w, r)| (*w, r.as_ref().map_or(f64::NAN, |r: &FixedPointReport| r.eps_g_star))),
        ));
    }
    out.rows("fixed_points.csv", &rows)?;
    let sims = figures::joint_simulations(fig)?;
    let mut sim_rows = Vec::new();
    for s in &sims {
        let file = format!("sim_{}.csv", s.sim.label);
        out.trajectory(&file, &trajectory_rows(&s.sim))?;
        let (eps, se) = s.terminal();
        sim_rows.push(JointSimRow {
            b_w: s.weight_bits,
            b_x: s.input_bits,
            omega_w: s.omega,
            file,
            tau: s.sim.states.last().map_or(0.0, |st| st.tau),
            eps_g_sim: eps,
            eps_g_sim_stderr: se,
            eps_g_star: s.fixed_point.as_ref().map_or(f64::NAN, |r| r.eps_g_star),
        });
    }
    out.rows("sim_summary.csv", &sim_rows)?;
    if !sim_rows.is_empty() {
        series.push(Series::markers(
            "simulation",
            sim_rows.iter().map(|r| (r.omega_w, r.eps_g_sim, r.eps_g_sim_stderr)),
        ));
    }
    out.chart("eps_g_star.svg", "steady-state error", "omega_w", "eps_g*", &series)
}
