//! Experiment configuration: a TOML file, then `STELAB_` environment
//! overrides, then command-line flags.
//!
//! Environment keys map onto the TOML tree by lower-casing and splitting on
//! a double underscore, so `STELAB_SIMULATE__TEACHER__DIM=400` sets
//! `simulate.teacher.dim`. Values are parsed as TOML literals and fall back
//! to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stelab_core::fixed_point::FixedPointConfig;
use stelab_core::ode::OdeConfig;
use stelab_core::pde::PdeConfig;
use stelab_core::simulator::SimConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};
use crate::presets::FigureId;

pub const ENV_PREFIX: &str = "STELAB_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    Ode,
    Pde,
    FixedPoint,
    Sweep,
    Reproduce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointJob {
    #[serde(flatten)]
    pub problem: FixedPointConfig,
    /// Learning rates to solve at; each gets one output row.
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepEngine {
    Simulate,
    Ode,
    FixedPoint,
}

/// Vary one field of an engine config. `parameter` is a dotted path into
/// that engine's table, e.g. `model.weight_quantizer.range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub engine: SweepEngine,
    pub parameter: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceJob {
    pub figure: FigureId,
    /// Merged over the preset's defaults before it runs.
    #[serde(default)]
    pub overrides: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<Kind>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub plot: bool,
    /// Replaces the master seed of every simulation.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulate: Option<SimConfig>,
    #[serde(default)]
    pub ode: Option<OdeConfig>,
    #[serde(default)]
    pub pde: Option<PdeConfig>,
    #[serde(default)]
    pub fixed_point: Option<FixedPointJob>,
    #[serde(default)]
    pub sweep: Option<SweepJob>,
    #[serde(default)]
    pub reproduce: Option<ReproduceJob>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub kind: Option<Kind>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub plot: bool,
    pub figure: Option<FigureId>,
}

/// Parse a TOML literal, falling back to a string.
pub fn parse_literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_owned())),
        Err(_) => Value::String(raw.to_owned()),
    }
}

/// Set `path` in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &[&str], value: Value) -> CliResult<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| CliError::Config("empty override key".into()))?;
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {} crosses a non-table value", path.join("."))))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively merge `over` into `base`; tables merge, everything else is
/// replaced.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn apply_env<I: IntoIterator<Item = (String, String)>>(table: &mut Table, vars: I) -> CliResult<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    // Deterministic order so that nested and flat keys resolve the same way.
    vars.sort();
    for (key, raw) in vars {
        let lowered = key[ENV_PREFIX.len()..].to_lowercase();
        let path: Vec<&str> = lowered.split("__").collect();
        set_path(table, &path, parse_literal(&raw))?;
    }
    Ok(())
}

fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolve file → environment → flags into a validated config.
pub fn load<I: IntoIterator<Item = (String, String)>>(
    file: Option<&Path>,
    env: I,
    cli: &CliOverrides,
) -> CliResult<ExperimentConfig> {
    let mut table = match file {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    apply_env(&mut table, env)?;
    if let Some(kind) = cli.kind {
        table.insert("kind".into(), Value::try_from(kind).expect("kind serializes"));
    }
    if let Some(out) = &cli.out {
        table.insert("out".into(), Value::String(out.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config("seed must fit in a signed 64-bit integer".into()))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    if let Some(threads) = cli.threads {
        table.insert("threads".into(), Value::Integer(threads as i64));
    }
    if cli.plot {
        table.insert("plot".into(), Value::Boolean(true));
    }
    if let Some(fig) = cli.figure {
        set_path(&mut table, &["reproduce", "figure"], Value::try_from(fig).expect("figure serializes"))?;
    }
    let mut cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let (Some(seed), Some(sim)) = (cfg.seed, cfg.simulate.as_mut()) {
        sim.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        let kind = self
            .kind
            .ok_or_else(|| CliError::Config("no experiment kind given".into()))?;
        let missing = |name: &str| CliError::Config(format!("missing [{name}] table"));
        match kind {
            Kind::Simulate if self.simulate.is_none() => return Err(missing("simulate")),
            Kind::Ode if self.ode.is_none() => return Err(missing("ode")),
            Kind::Pde if self.pde.is_none() => return Err(missing("pde")),
            Kind::FixedPoint if self.fixed_point.is_none() => return Err(missing("fixed_point")),
            Kind::Sweep => {
                let sweep = self.sweep.as_ref().ok_or_else(|| missing("sweep"))?;
                let base_present = match sweep.engine {
                    SweepEngine::Simulate => self.simulate.is_some(),
                    SweepEngine::Ode => self.ode.is_some(),
                    SweepEngine::FixedPoint => self.fixed_point.is_some(),
                };
                if !base_present {
                    return Err(CliError::Config(format!(
                        "sweep over {:?} needs the matching engine table",
                        sweep.engine
                    )));
                }
                if sweep.values.is_empty() {
                    return Err(CliError::Config("sweep has no values".into()));
                }
            }
            Kind::Reproduce if self.reproduce.is_none() => return Err(missing("reproduce")),
            _ => {}
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if let Some(sim) = &self.simulate {
            sim.validate()?;
        }
        if let Some(fp) = &self.fixed_point {
            fp.problem.model.validate()?;
            if fp.etas.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return Err(CliError::Config("fixed-point learning rates must be positive".into()));
            }
        }
        self.check_out_dir()
    }

    fn check_out_dir(&self) -> CliResult<()> {
        let dir = &self.out;
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        let probe = dir.join(".stelab-write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))
    }

    /// The resolved config as TOML, written next to the outputs so a run
    /// can be repeated with `--config`.
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Replace one dotted path of a serializable value.
pub fn with_field<T>(base: &T, parameter: &str, value: &Value) -> CliResult<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut table = match Value::try_from(base).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Table(t) => t,
        _ => return Err(CliError::Config("sweep base is not a table".into())),
    };
    let path: Vec<&str> = parameter.split('.').collect();
    set_path(&mut table, &path, value.clone())?;
    let out: T = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{parameter}: {e}")))?;
    // Unknown keys are dropped silently by deserialization; catch them here.
    let back = Value::try_from(&out).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cur = Some(&back);
    for key in &path {
        cur = cur.and_then(|v| v.get(*key));
    }
    if cur != Some(value) {
        return Err(CliError::Config(format!("{parameter} is not a field of the swept config")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIM: &str = r#"
kind = "simulate"
out = "OUT"

[simulate]
horizon_tau = 2.0
record_stride_tau = 0.5
init = "gaussian_std"
runs = 2
master_seed = 5

[simulate.model]
ridge = 1.0
learning_rate = 0.04
weight_quantizer = { bits = 3, range = 1.0 }

[simulate.teacher]
dim = 50
rho = 1.0
noise_var = 0.0
teacher_dist = { kind = "all_ones" }
"#;

    fn write_config(dir: &Path) -> PathBuf {
        let path = dir.join("c.toml");
        let out = dir.join("out");
        std::fs::write(&path, SIM.replace("OUT", &out.display().to_string())).unwrap();
        path
    }

    #[test]
    fn literals_parse_as_toml_or_strings() {
        assert_eq!(parse_literal("3"), Value::Integer(3));
        assert_eq!(parse_literal("0.5"), Value::Float(0.5));
        assert_eq!(parse_literal("true"), Value::Boolean(true));
        assert_eq!(parse_literal("fig2"), Value::String("fig2".into()));
        assert_eq!(parse_literal("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn env_overrides_file_and_flags_override_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let env = vec![
            ("STELAB_SIMULATE__TEACHER__DIM".to_string(), "80".to_string()),
            ("STELAB_SIMULATE__MASTER_SEED".to_string(), "11".to_string()),
            ("OTHER_VAR".to_string(), "x".to_string()),
        ];
        let cfg = load(Some(&path), env.clone(), &CliOverrides::default()).unwrap();
        let sim = cfg.simulate.unwrap();
        assert_eq!(sim.teacher.dim, 80);
        assert_eq!(sim.master_seed, 11);
        let flags = CliOverrides {
            seed: Some(42),
            ..Default::default()
        };
        let cfg = load(Some(&path), env, &flags).unwrap();
        assert_eq!(cfg.simulate.unwrap().master_seed, 42);
    }

    #[test]
    fn missing_engine_table_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let flags = CliOverrides {
            kind: Some(Kind::Ode),
            ..Default::default()
        };
        let err = load(Some(&path), Vec::new(), &flags).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let env = vec![("STELAB_BOGUS".to_string(), "1".to_string())];
        assert!(matches!(
            load(Some(&path), env, &CliOverrides::default()),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn with_field_replaces_nested_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let sim = load(Some(&path), Vec::new(), &CliOverrides::default()).unwrap().simulate.unwrap();
        let changed = with_field(&sim, "model.weight_quantizer.range", &Value::Float(1.5)).unwrap();
        assert_eq!(changed.model.weight_quantizer.unwrap().range, 1.5);
        assert!(with_field(&sim, "model.learning_rate", &Value::String("x".into())).is_err());
        assert!(with_field(&sim, "model.no_such_field", &Value::Float(1.0)).is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path());
        let cfg = load(Some(&path), Vec::new(), &CliOverrides::default()).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
