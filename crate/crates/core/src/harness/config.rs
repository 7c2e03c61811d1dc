//! Run configuration: a TOML file plus `--set key=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::mmcc::TrainerConfig;
use crate::problems::heston::PdeGrid;
use crate::problems::{DsiceSpec, FbsdeSpec, GrowthSpec, HestonSpec, LqSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProblemId {
    Fbsde,
    Heston,
    Growth,
    Dsice,
    /// Linear-quadratic family.
    Custom,
}

impl ProblemId {
    pub fn table(self) -> &'static str {
        match self {
            ProblemId::Fbsde => "fbsde",
            ProblemId::Heston => "heston",
            ProblemId::Growth => "growth",
            ProblemId::Dsice => "dsice",
            ProblemId::Custom => "custom",
        }
    }

    /// Problem key that a bare `T` refers to.
    fn horizon_key(self) -> &'static str {
        match self {
            ProblemId::Fbsde | ProblemId::Heston => "time",
            _ => "horizon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub paths: usize,
    pub minibatch: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub max_sweeps: usize,
    pub rel_tol: f64,
    pub eval_paths: usize,
    pub force_general: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainerConfig::default();
        Self {
            paths: d.paths,
            minibatch: d.minibatch,
            minibatches: d.minibatches,
            learning_rate: d.learning_rate,
            lr_decay: d.lr_decay,
            max_sweeps: d.max_sweeps,
            rel_tol: d.rel_tol,
            eval_paths: d.eval_paths,
            force_general: d.force_general,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Monte Carlo samples for the FBSDE oracle.
    pub samples: usize,
    pub grid: PdeGrid,
    /// Points per axis of the DSICE constant-policy grid.
    pub grid_points: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            grid: PdeGrid::default(),
            grid_points: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Compare against the problem's reference solution.
    #[serde(default = "yes")]
    pub oracle: bool,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default, rename = "oracle_settings")]
    pub oracle_settings: OracleSection,
    #[serde(default)]
    pub fbsde: FbsdeSpec,
    #[serde(default)]
    pub heston: HestonSpec,
    #[serde(default)]
    pub growth: GrowthSpec,
    #[serde(default)]
    pub dsice: DsiceSpec,
    #[serde(default)]
    pub custom: LqSpec,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            paths: t.paths,
            minibatch: t.minibatch,
            minibatches: t.minibatches,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            max_sweeps: t.max_sweeps,
            rel_tol: t.rel_tol,
            eval_paths: t.eval_paths,
            seed: self.seed,
            force_general: t.force_general,
        }
    }

    /// Canonical TOML with only the selected problem's table.
    pub fn echo(&self) -> String {
        let mut v = toml::Table::try_from(self).expect("config serializes");
        for other in ["fbsde", "heston", "growth", "dsice", "custom"] {
            if other != self.problem.table() {
                v.remove(other);
            }
        }
        toml::to_string(&v).expect("config serializes")
    }
}

const TRAINER_ALIASES: &[(&str, &str)] = &[
    ("N", "paths"),
    ("b", "minibatch"),
    ("m", "minibatches"),
    ("lr", "learning_rate"),
    ("sweeps", "max_sweeps"),
];

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Dotted path for a `--set` key. Bare keys resolve to top-level fields,
/// then trainer fields (with `N`, `b`, `m` aliases), then the selected
/// problem's table (`T` is its horizon, `N_T` its step count).
fn resolve_key(key: &str, problem: Option<ProblemId>) -> Result<Vec<String>, HarnessError> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    if ["problem", "seed", "output", "oracle"].contains(&key) {
        return Ok(vec![key.to_string()]);
    }
    let trainer_fields = [
        "paths",
        "minibatch",
        "minibatches",
        "learning_rate",
        "lr_decay",
        "max_sweeps",
        "rel_tol",
        "eval_paths",
        "force_general",
    ];
    if let Some((_, f)) = TRAINER_ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(vec!["trainer".into(), f.to_string()]);
    }
    if trainer_fields.contains(&key) {
        return Ok(vec!["trainer".into(), key.to_string()]);
    }
    let p = problem.ok_or_else(|| HarnessError::Config(format!("--set {key}: no problem selected")))?;
    let field = match key {
        "T" => p.horizon_key(),
        "N_T" => "steps",
        other => other,
    };
    Ok(vec![p.table().to_string(), field.to_string()])
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), HarnessError> {
    let (last, parents) = path.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("--set {}: {p} is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Build a config from optional file text, an optional problem id and
/// `key=value` overrides, applied in that order.
pub fn load_config(text: Option<&str>, problem: Option<ProblemId>, sets: &[String]) -> Result<RunConfig, HarnessError> {
    let mut table: toml::Table = match text {
        Some(t) => t
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    if let Some(p) = problem {
        table.insert("problem".into(), toml::Value::String(p.table().into()));
    }
    let selected = table
        .get("problem")
        .and_then(|v| v.as_str())
        .and_then(|s| <ProblemId as clap::ValueEnum>::from_str(s, true).ok());
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--set {s}: expected key=value")))?;
        let path = resolve_key(k.trim(), selected)?;
        set_path(&mut table, &path, parse_value(v.trim()))?;
    }
    if !table.contains_key("problem") {
        return Err(HarnessError::Config("missing field `problem`".into()));
    }
    RunConfig::deserialize(table).map_err(|e| HarnessError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_keys_resolve_by_problem() {
        let c = load_config(
            None,
            Some(ProblemId::Growth),
            &["T=7".into(), "b=32".into(), "seed=3".into()],
        )
        .unwrap();
        assert_eq!(c.growth.horizon, 7);
        assert_eq!(c.trainer.minibatch, 32);
        assert_eq!(c.seed, 3);
        let c = load_config(None, Some(ProblemId::Fbsde), &["d=1".into(), "T=2.0".into()]).unwrap();
        assert_eq!(c.fbsde.d, 1);
        assert_eq!(c.fbsde.time, 2.0);
    }

    #[test]
    fn unknown_field_is_reported() {
        let e = load_config(Some("problem = \"heston\"\n[heston]\nbogus = 1\n"), None, &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let c = load_config(None, Some(ProblemId::Dsice), &["T=60".into(), "dsice.tail=40".into()]).unwrap();
        let again = load_config(Some(&c.echo()), None, &[]).unwrap();
        assert_eq!(c, again);
    }
}
