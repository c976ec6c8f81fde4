//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::compare::{compare, CompareOptions, CompareReport};
use crate::config::{load, CliOverrides, Kind};
use crate::csvio::{read_trajectory, write_rows};
use crate::error::{CliError, CliResult};
use crate::manifest::MANIFEST_NAME;
use crate::presets::FigureId;
use crate::runner;

#[derive(Debug, Parser)]
#[command(name = "stelab", version, about = "Learning dynamics of quantization-aware training")]
pub struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for every simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Render SVG charts next to the CSV files.
    #[arg(long, global = true)]
    pub plot: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte-Carlo simulation of the STE dynamics.
    Simulate,
    /// Integrate the macroscopic ODEs.
    Ode,
    /// Solve the coordinate-density PDE.
    Pde,
    /// Stationary points and their stability.
    Fixedpoint,
    /// Vary one parameter of an engine config.
    Sweep,
    /// Regenerate a figure from its preset.
    Reproduce {
        /// fig1, fig2, fig3, fig4, fig5, fig6 or appF.
        figure: FigureId,
    },
    /// Compare the ε_g columns of two trajectory CSV files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Absolute tolerance floor.
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
        /// Multiplier on the combined standard error.
        #[arg(long, default_value_t = 3.0)]
        stderr_factor: f64,
        /// Resample `b` onto the τ grid of `a`.
        #[arg(long)]
        interpolate: bool,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with<I, T, E>(args: I, env: E) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    E: IntoIterator<Item = (String, String)>,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    let command = raw.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    match execute(cli, env, command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute<E>(cli: Cli, env: E, command: Vec<String>) -> CliResult<()>
where
    E: IntoIterator<Item = (String, String)>,
{
    let (kind, figure) = match &cli.command {
        Command::Simulate => (Kind::Simulate, None),
        Command::Ode => (Kind::Ode, None),
        Command::Pde => (Kind::Pde, None),
        Command::Fixedpoint => (Kind::FixedPoint, None),
        Command::Sweep => (Kind::Sweep, None),
        Command::Reproduce { figure } => (Kind::Reproduce, Some(*figure)),
        Command::Compare {
            a,
            b,
            tol,
            stderr_factor,
            interpolate,
        } => {
            let opts = CompareOptions {
                abs_tol: *tol,
                stderr_factor: *stderr_factor,
                interpolate: *interpolate,
            };
            return run_compare(a, b, &opts, cli.out.as_deref());
        }
    };
    let overrides = CliOverrides {
        kind: Some(kind),
        out: cli.out.clone(),
        seed: cli.seed,
        threads: cli.threads,
        plot: cli.plot,
        figure,
    };
    let cfg = load(cli.config.as_deref(), env, &overrides)?;
    let manifest = runner::run(&cfg, command)?;
    println!(
        "wrote {} files and {} to {}",
        manifest.outputs.len(),
        MANIFEST_NAME,
        cfg.out.display()
    );
    Ok(())
}

fn print_report(r: &CompareReport) {
    for p in &r.points {
        println!(
            "tau={:<12} eps_a={:.6} eps_b={:.6} diff={:.3e} allowed={:.3e}",
            p.tau, p.eps_g_a, p.eps_g_b, p.diff, p.allowed
        );
    }
    println!("sup |diff| = {:.6e} at tau = {}", r.sup_diff, r.sup_tau);
    match r.first_failure_tau {
        None => println!("PASS ({} points)", r.points.len()),
        Some(t) => println!("FAIL: first divergence at tau = {t}"),
    }
}

fn run_compare(a: &std::path::Path, b: &std::path::Path, opts: &CompareOptions, out: Option<&std::path::Path>) -> CliResult<()> {
    let ra = read_trajectory(a)?;
    let rb = read_trajectory(b)?;
    let report = compare(&ra, &rb, opts)?;
    print_report(&report);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("compare.csv"), &report.points)?;
    }
    match report.first_failure_tau {
        None => Ok(()),
        Some(t) => Err(CliError::Tolerance(format!(
            "sup |diff| = {:.3e}; first divergence at tau = {t}",
            report.sup_diff
        ))),
    }
}
