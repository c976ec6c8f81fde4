//! Figure presets. Every field can be overridden through
//! `[reproduce.overrides]`, which is merged over the serialized defaults.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stelab_core::quantizer::QuantizerSpec;
use stelab_core::simulator::HistogramBins;
use toml::{Table, Value};

use crate::config::merge;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FigureId {
    #[serde(rename = "fig1")]
    Fig1,
    #[serde(rename = "fig2")]
    Fig2,
    #[serde(rename = "fig3")]
    Fig3,
    #[serde(rename = "fig4")]
    Fig4,
    #[serde(rename = "fig5")]
    Fig5,
    #[serde(rename = "fig6")]
    Fig6,
    #[serde(rename = "appF")]
    AppF,
}

impl FigureId {
    pub const ALL: [FigureId; 7] = [
        FigureId::Fig1,
        FigureId::Fig2,
        FigureId::Fig3,
        FigureId::Fig4,
        FigureId::Fig5,
        FigureId::Fig6,
        FigureId::AppF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureId::Fig1 => "fig1",
            FigureId::Fig2 => "fig2",
            FigureId::Fig3 => "fig3",
            FigureId::Fig4 => "fig4",
            FigureId::Fig5 => "fig5",
            FigureId::Fig6 => "fig6",
            FigureId::AppF => "appF",
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FigureId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FigureId::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = FigureId::ALL.iter().map(|f| f.name()).collect();
                format!("unknown figure '{s}', expected one of {}", names.join(", "))
            })
    }
}

/// One ε_g(τ) curve: an ODE solution and an averaged simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    #[serde(default)]
    pub weight: Option<QuantizerSpec>,
    #[serde(default)]
    pub input: Option<QuantizerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub learning_rate: f64,
    pub ridge: f64,
    pub dim: usize,
    pub runs: usize,
    pub horizon_tau: f64,
    pub record_stride_tau: f64,
    pub ode_dtau: f64,
    pub curves: Vec<Curve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFigure {
    pub seed: u64,
    pub panels: Vec<Panel>,
}

/// Coordinate densities: simulated histograms against the PDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityFigure {
    pub seed: u64,
    pub dim: usize,
    pub runs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub weight: QuantizerSpec,
    #[serde(default)]
    pub input: Option<QuantizerSpec>,
    pub taus: Vec<f64>,
    pub pde_cells: usize,
    pub pde_dt: f64,
    pub bins: HistogramBins,
}

/// Input-only fixed points as a function of the input range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputOnlyFigure {
    pub input_bits: Vec<u32>,
    pub ranges: Vec<f64>,
    pub ridge: f64,
    pub noise_var: f64,
    /// Learning rate at which ε* is reported.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSimulation {
    pub dim: usize,
    pub runs: usize,
    pub horizon_tau: f64,
    pub record_stride_tau: f64,
    pub weight_bits: Vec<u32>,
    pub input_bits: Vec<u32>,
    pub ranges: Vec<f64>,
}

/// Joint fixed points ε*(ω) with optional long simulations on a subgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFigure {
    pub seed: u64,
    pub learning_rate: f64,
    pub ridge: f64,
    pub noise_var: f64,
    pub input_range: f64,
    pub input_bits: Vec<u32>,
    /// Adds an unquantized-input baseline curve.
    pub include_unquantized_input: bool,
    pub weight_bits: Vec<u32>,
    pub ranges: Vec<f64>,
    pub simulation: JointSimulation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Trajectories(TrajectoryFigure),
    Densities(DensityFigure),
    InputOnly(InputOnlyFigure),
    Joint(JointFigure),
}

impl Preset {
    /// Master seed of the simulations, if the preset runs any.
    pub fn seed(&self) -> Option<u64> {
        match self {
            Preset::Trajectories(f) => Some(f.seed),
            Preset::Densities(f) => Some(f.seed),
            Preset::InputOnly(_) => None,
            Preset::Joint(f) => Some(f.seed),
        }
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    // Rounded so that labels and CSV values read cleanly.
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

fn weight_curve(bits: u32, range: f64, label: String) -> Curve {
    Curve {
        label,
        weight: Some(QuantizerSpec::new(bits, range)),
        input: None,
    }
}

fn bit_panel(name: &str, ridge: f64) -> Panel {
    Panel {
        name: name.into(),
        learning_rate: 0.04,
        ridge,
        dim: 900,
        runs: 5,
        horizon_tau: 150.0,
        record_stride_tau: 1.0,
        ode_dtau: 0.01,
        curves: (2..=5).map(|b| weight_curve(b, 1.0, format!("b{b}"))).collect(),
    }
}

pub const FIG3_RANGES: [f64; 5] = [0.25, 0.5, 1.0, 1.25, 1.5];

fn range_panel(name: &str, ridge: f64) -> Panel {
    Panel {
        curves: FIG3_RANGES
            .iter()
            .map(|&w| weight_curve(3, w, format!("omega{w}")))
            .collect(),
        ..bit_panel(name, ridge)
    }
}

fn input_panel(weight_bits: u32) -> Panel {
    let weight = Some(QuantizerSpec::new(weight_bits, 1.0));
    let mut curves: Vec<Curve> = (3..=5)
        .map(|bx| Curve {
            label: format!("bx{bx}"),
            weight,
            input: Some(QuantizerSpec::new(bx, 1.0)),
        })
        .collect();
    curves.push(Curve {
        label: "no_input_quant".into(),
        weight,
        input: None,
    });
    Panel {
        name: format!("b{weight_bits}"),
        learning_rate: 0.05,
        ridge: 1.0,
        dim: 500,
        runs: 5,
        horizon_tau: 150.0,
        record_stride_tau: 1.0,
        ode_dtau: 0.01,
        curves,
    }
}

/// Default parameters of each figure.
pub fn default_preset(id: FigureId) -> Preset {
    match id {
        FigureId::Fig1 => Preset::Densities(DensityFigure {
            seed: 1,
            dim: 3000,
            runs: 5,
            learning_rate: 0.05,
            ridge: 1.0,
            weight: QuantizerSpec::new(2, 2.0),
            input: Some(QuantizerSpec::new(2, 2.0)),
            taus: vec![10.0, 25.0, 50.0, 100.0],
            // Thresholds at ±1 fall on cell faces; coarser grids smear the
            // spike at w = 1 through upwind diffusion.
            pde_cells: 3840,
            pde_dt: 0.001,
            bins: HistogramBins::default_for(2.0),
        }),
        FigureId::Fig2 => Preset::Trajectories(TrajectoryFigure {
            seed: 2,
            panels: vec![bit_panel("bits", 1.0)],
        }),
        FigureId::Fig3 => Preset::Trajectories(TrajectoryFigure {
            seed: 3,
            panels: vec![range_panel("ranges", 1.0)],
        }),
        FigureId::Fig4 => Preset::Trajectories(TrajectoryFigure {
            seed: 4,
            panels: vec![input_panel(3), input_panel(4)],
        }),
        FigureId::Fig5 => Preset::InputOnly(InputOnlyFigure {
            input_bits: vec![2, 3, 4, 10],
            ranges: grid(0.1, 4.0, 0.05),
            ridge: 0.0,
            noise_var: 0.0,
            learning_rate: 1e-4,
        }),
        FigureId::Fig6 => Preset::Joint(JointFigure {
            seed: 6,
            learning_rate: 1e-4,
            ridge: 0.0,
            noise_var: 0.0,
            input_range: 1.0,
            input_bits: vec![2, 3, 4],
            include_unquantized_input: true,
            weight_bits: vec![2, 3],
            ranges: grid(0.2, 3.0, 0.02),
            simulation: JointSimulation {
                dim: 100,
                runs: 5,
                horizon_tau: 1e5,
                record_stride_tau: 5e3,
                weight_bits: vec![2],
                input_bits: vec![2],
                ranges: vec![0.8, 1.2, 1.6],
            },
        }),
        FigureId::AppF => {
            let mut panels = Vec::new();
            for ridge in [0.5, 1.0, 1.5] {
                panels.push(bit_panel(&format!("bits_lambda{ridge}"), ridge));
            }
            for ridge in [0.5, 1.0, 1.5] {
                panels.push(range_panel(&format!("ranges_lambda{ridge}"), ridge));
            }
            Preset::Trajectories(TrajectoryFigure { seed: 7, panels })
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: &Table) -> CliResult<T> {
    let mut table = match Value::try_from(base).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Table(t) => t,
        _ => unreachable!("presets serialize to tables"),
    };
    merge(&mut table, overrides);
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("preset override: {e}")))
}

/// Preset with overrides applied; `seed` replaces the preset's own seed.
pub fn resolve(id: FigureId, overrides: &Table, seed: Option<u64>) -> CliResult<Preset> {
    let preset = match default_preset(id) {
        Preset::Trajectories(f) => {
            let mut f = overlay(&f, overrides)?;
            f.seed = seed.unwrap_or(f.seed);
            Preset::Trajectories(f)
        }
        Preset::Densities(f) => {
            let mut f = overlay(&f, overrides)?;
            f.seed = seed.unwrap_or(f.seed);
            Preset::Densities(f)
        }
        Preset::InputOnly(f) => Preset::InputOnly(overlay(&f, overrides)?),
        Preset::Joint(f) => {
            let mut f = overlay(&f, overrides)?;
            f.seed = seed.unwrap_or(f.seed);
            Preset::Joint(f)
        }
    };
    Ok(preset)
}
