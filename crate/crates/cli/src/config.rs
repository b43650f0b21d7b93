//! Run configuration: where the data comes from and how the experiment runs.

use std::path::{Path, PathBuf};

use metastack::baselines::{default_lambdas, Scenario, ScenarioConfig};
use metastack::forest::{ForestParams, Grid};
use metastack::stacking::CvPlan;
use metastack::tabular::{SchemaOptions, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Item count of the default synthetic dataset.
pub const DEFAULT_ITEMS: usize = 20_000;
/// Item count of the `small` synthetic dataset.
pub const SMALL_ITEMS: usize = 2_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum DataSource {
    Synth {
        spec: SynthSpec,
    },
    Csv {
        features: PathBuf,
        dates: Option<PathBuf>,
        #[serde(default)]
        schema: SchemaOptions,
    },
}

/// Scope of date compression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateScope {
    /// Each unit summarizes its own date columns.
    #[default]
    PerUnit,
    /// One summary over all date columns.
    Global,
}

/// Everything a run depends on. Together with its seed it reproduces the
/// run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub dates: DateScope,
    /// Missing-cell marker; derived from the data when absent.
    pub marker: Option<f64>,
    pub grid: Grid,
    pub plan: CvPlan,
    pub forest: ForestParams,
    pub scenarios: Vec<Scenario>,
    pub lambdas: Vec<f64>,
    /// Seeds the generator, the fold assignment, the forests and the noise.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth { spec: SynthSpec::four_lines(DEFAULT_ITEMS, 0) },
            dates: DateScope::PerUnit,
            marker: None,
            grid: Grid::reduced(),
            plan: CvPlan::default(),
            forest: ForestParams::default(),
            scenarios: Scenario::ALL.to_vec(),
            lambdas: default_lambdas(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Copies the run seed into every place that takes one and checks the
    /// settings.
    pub fn resolved(mut self) -> Result<Self, CliError> {
        self.plan.seed = self.seed;
        self.forest.seed = self.seed;
        if let DataSource::Synth { spec } = &mut self.data {
            spec.seed = self.seed;
        }
        self.plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.grid = self.grid.normalized().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.scenarios.is_empty() {
            return Err(CliError::Usage("no scenarios selected".into()));
        }
        self.scenarios.sort();
        self.scenarios.dedup();
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(CliError::Usage(format!("noise level {l} must be finite and non-negative")));
        }
        if let Some(m) = self.marker.filter(|m| !m.is_finite()) {
            return Err(CliError::Usage(format!("marker {m} is not finite")));
        }
        Ok(self)
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig { grid: self.grid.clone(), plan: self.plan.clone(), base: self.forest.clone() }
    }

    /// Sorted-key JSON of the configuration.
    pub fn to_canonical_json(&self) -> Result<String, CliError> {
        crate::report::canonical_json(self)
    }
}

/// Parses `--synth`: `default`, `small`, or a path to a JSON spec.
pub fn synth_spec(choice: &str) -> Result<SynthSpec, CliError> {
    match choice {
        "default" => Ok(SynthSpec::four_lines(DEFAULT_ITEMS, 0)),
        "small" => Ok(SynthSpec::four_lines(SMALL_ITEMS, 0)),
        path => {
            let text = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read synth spec {path}: {e}")))?;
            serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("invalid synth spec {path}: {e}")))
        }
    }
}

/// Parses `--scenarios 1,2,3`.
pub fn parse_scenarios(s: &str) -> Result<Vec<Scenario>, String> {
    s.split(',')
        .map(|p| {
            let n: u8 = p.trim().parse().map_err(|_| format!("{p:?} is not a scenario number"))?;
            Scenario::from_number(n).ok_or_else(|| format!("no scenario {n}; choose from 1, 2, 3"))
        })
        .collect()
}

/// Parses `--lambdas 0,0.5,1`.
pub fn parse_lambdas(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| format!("{p:?} is not a number"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "scenarios": [2]}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scenarios, vec![Scenario::Stacked]);
        assert_eq!(cfg.grid, Grid::reduced());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn resolve_propagates_seed() {
        let cfg = RunConfig { seed: 42, ..Default::default() }.resolved().unwrap();
        assert_eq!(cfg.plan.seed, 42);
        let DataSource::Synth { spec } = &cfg.data else { panic!() };
        assert_eq!(spec.seed, 42);
    }

    #[test]
    fn round_trips() {
        let cfg = RunConfig::default().resolved().unwrap();
        let text = cfg.to_canonical_json().unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parses_lists() {
        assert_eq!(parse_scenarios("3,1").unwrap(), vec![Scenario::SharedPool, Scenario::Isolated]);
        assert!(parse_scenarios("4").is_err());
        assert_eq!(parse_lambdas("0, 0.5").unwrap(), vec![0.0, 0.5]);
        assert!(parse_lambdas("x").is_err());
        assert_eq!(synth_spec("small").unwrap().n_items, SMALL_ITEMS);
        assert!(synth_spec("/nonexistent.json").is_err());
    }
}
