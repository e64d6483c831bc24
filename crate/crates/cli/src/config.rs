//! Run configuration: defaults, an optional JSON file, then command-line
//! flags, in increasing precedence. The resolved value is written next to
//! every command's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lightcone::dynamics::{CaConfig, InitialCondition};
use lightcone::engine::{FitConfig, FitMode, SelectionWeights};
use lightcone::stfield::{Boundary, FieldGeometry};

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` lets rayon decide.
    pub jobs: Option<usize>,
    pub cone: ConeConfig,
    pub simulate: SimulateConfig,
    pub fit: FitSection,
    pub generate: GenerateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: None,
            cone: ConeConfig::default(),
            simulate: SimulateConfig::default(),
            fit: FitSection::default(),
            generate: GenerateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConeConfig {
    pub past_horizon: usize,
    pub future_horizon: usize,
    pub speed: usize,
    pub boundary: Boundary,
}

impl Default for ConeConfig {
    fn default() -> Self {
        ConeConfig {
            past_horizon: 2,
            future_horizon: 0,
            speed: 1,
            boundary: Boundary::Periodic,
        }
    }
}

impl ConeConfig {
    pub fn apply(&self, geometry: FieldGeometry) -> FieldGeometry {
        geometry
            .with_cone(self.past_horizon, self.future_horizon, self.speed)
            .with_boundary(self.boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    #[default]
    Zeros,
    Patches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub spatial_size: usize,
    pub time_steps: usize,
    pub burn_in: usize,
    pub initial: InitialKind,
    /// Sign of the first patch block.
    pub first_positive: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            spatial_size: 100,
            time_steps: 200,
            burn_in: 100,
            initial: InitialKind::Zeros,
            first_positive: true,
        }
    }
}

impl SimulateConfig {
    pub fn ca_config(&self, seed: u64) -> CaConfig {
        CaConfig {
            spatial_size: self.spatial_size,
            time_steps: self.time_steps,
            burn_in: self.burn_in,
            initial: match self.initial {
                InitialKind::Zeros => InitialCondition::Zeros,
                InitialKind::Patches => InitialCondition::Patches {
                    first_positive: self.first_positive,
                },
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub k_max: usize,
    pub delta: f64,
    pub max_iterations: usize,
    pub n_runs: usize,
    /// Fraction of time steps used for training.
    pub split: f64,
    pub hard: bool,
    pub selection: SelectionWeights,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        FitSection {
            k_max: d.k_max,
            delta: d.delta,
            max_iterations: d.max_iterations,
            n_runs: d.n_runs,
            split: 0.5,
            hard: false,
            selection: d.selection,
        }
    }
}

impl FitSection {
    pub fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            k_max: self.k_max,
            delta: self.delta,
            max_iterations: self.max_iterations,
            n_runs: self.n_runs,
            seed,
            mode: if self.hard { FitMode::Hard } else { FitMode::Mixed },
            selection: self.selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Slices simulated after the initial ones.
    pub t_max: usize,
    pub initial: InitialKind,
    pub first_positive: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            t_max: 200,
            initial: InitialKind::Patches,
            first_positive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub replicates: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { replicates: 20 }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, when given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let f = &self.fit;
        if !(f.split > 0.0 && f.split < 1.0) {
            return Err(CliError::Usage(format!("split {} must lie in (0, 1)", f.split)));
        }
        if f.k_max == 0 || f.n_runs == 0 || f.max_iterations == 0 {
            return Err(CliError::Usage("kmax, runs and max-iter must be positive".into()));
        }
        if !(f.delta > 0.0) {
            return Err(CliError::Usage(format!("delta {} must be positive", f.delta)));
        }
        if self.cone.past_horizon == 0 || self.cone.speed == 0 {
            return Err(CliError::Usage("hp and speed must be positive".into()));
        }
        if self.cone.future_horizon != 0 {
            return Err(CliError::Usage(
                "only hf = 0 (scalar future cones) is supported".into(),
            ));
        }
        if self.bench.replicates == 0 {
            return Err(CliError::Usage("replicates must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).map_err(lightcone::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
