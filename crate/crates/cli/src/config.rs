//! Run configuration: a JSON file overridable by flags, echoed next to the
//! artifacts so that any run can be replayed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use synthforest::inference::PermutationScheme;
use synthforest::panel::{CsvSchema, TrailingWeek};
use synthforest::sim::SimConfig;
use synthforest::solvers::{EnetOptions, ScmOptions};
use synthforest::{ForestConfig, SplitSpec};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Forest,
    Scm,
    Enet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[default]
    MovingBlock,
    Iid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSettings {
    pub input: Option<PathBuf>,
    pub schema: CsvSchema,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    /// Raw unit -> panel unit.
    pub merge: BTreeMap<String, String>,
    pub trailing_week: TrailingWeek,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSettings {
    /// Panel CSV as written by `ingest` or `simulate`.
    pub path: Option<PathBuf>,
    pub treated: Option<String>,
    /// Controls to use, in order; all other units when empty.
    pub controls: Vec<String>,
    /// Onset as a date (first treated week start) or a period index.
    pub t0: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnetSettings {
    /// Fixed penalty; the grid is searched when either value is missing.
    pub lambda: Option<f64>,
    pub alpha_mix: Option<f64>,
    pub options: EnetOptions,
    /// Explicit `(lambda, alpha_mix)` grid; the data-driven default when empty.
    pub grid: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningSettings {
    pub enabled: bool,
    pub split: SplitSpec,
    /// Candidate `mtry` values; `1..=N` when empty.
    pub mtry_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapSettings {
    pub n_boot: usize,
    pub block_length: usize,
    pub level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            n_boot: 10_000,
            block_length: 3,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformalSettings {
    pub scheme: SchemeKind,
    pub q: f64,
    /// Random permutations drawn by the iid scheme.
    pub n_samples: usize,
    /// Constant effect under the null.
    pub null: f64,
    pub spec_test: bool,
    pub kappa_max: usize,
}

impl Default for ConformalSettings {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::MovingBlock,
            q: 1.0,
            n_samples: 10_000,
            null: 0.0,
            spec_test: false,
            kappa_max: 10,
        }
    }
}

impl ConformalSettings {
    pub fn scheme(&self, seed: u64) -> PermutationScheme {
        match self.scheme {
            SchemeKind::MovingBlock => PermutationScheme::MovingBlock,
            SchemeKind::Iid => PermutationScheme::Iid {
                n_samples: self.n_samples,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceboSettings {
    pub exclude_multiplier: f64,
}

impl Default for PlaceboSettings {
    fn default() -> Self {
        Self { exclude_multiplier: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSettings {
    /// Share of the pre-period held out for the validation table.
    pub holdout: f64,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self { holdout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub ingest: IngestSettings,
    pub panel: PanelSettings,
    pub estimator: EstimatorKind,
    pub forest: ForestConfig,
    pub scm: ScmOptions,
    pub enet: EnetSettings,
    pub tuning: TuningSettings,
    pub bootstrap: BootstrapSettings,
    pub conformal: ConformalSettings,
    pub placebo: PlaceboSettings,
    pub compare: CompareSettings,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            ingest: IngestSettings::default(),
            panel: PanelSettings::default(),
            estimator: EstimatorKind::Forest,
            forest: ForestConfig::default(),
            scm: ScmOptions::default(),
            enet: EnetSettings::default(),
            tuning: TuningSettings::default(),
            bootstrap: BootstrapSettings::default(),
            conformal: ConformalSettings::default(),
            placebo: PlaceboSettings::default(),
            compare: CompareSettings::default(),
            simulate: SimConfig::default(),
        }
    }
}

/// Config written next to the artifacts, tagged with the subcommand.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub command: String,
    #[serde(flatten)]
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a config file; an echo file is accepted too (its command tag is
    /// ignored).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
        if let Some(map) = value.as_object_mut() {
            map.remove("command");
        }
        serde_json::from_value(value).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn write_echo(&self, command: &str) -> Result<()> {
        let echo = ConfigEcho {
            command: command.to_string(),
            config: self.clone(),
        };
        let path = self.output_dir.join("config_echo.json");
        fs::write(&path, serde_json::to_string_pretty(&echo)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Parses `A+B=C` into `{A: C, B: C}`.
pub fn parse_merge(spec: &str) -> Result<Vec<(String, String)>> {
    let Some((sources, target)) = spec.split_once('=') else {
        bail!(UsageError(format!("merge {spec:?} must look like A+B=C")));
    };
    let target = target.trim();
    let sources: Vec<&str> = sources.split('+').map(str::trim).collect();
    if target.is_empty() || sources.iter().any(|s| s.is_empty()) {
        bail!(UsageError(format!("merge {spec:?} must look like A+B=C")));
    }
    Ok(sources.into_iter().map(|s| (s.to_string(), target.to_string())).collect())
}
