//! Mixed versus hard benchmark over independent replicates.
//!
//! Each replicate simulates a training realization and an independent one,
//! fits both estimators to the first part of the training realization, and
//! scores one-step forecasts on its held-out future and on the independent
//! realization.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lightcone::dynamics::simulate_true;
use lightcone::engine::{fit, FitMode, ModelArtifact};
use lightcone::forecast::{one_step_forecasts, ForecastKind};
use lightcone::rng::derive_seed;
use lightcone::stfield::{extract_light_cones, split_time, split_train_test, Field};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RESULTS_CSV: &str = "results.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mixed,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The held-out later part of the training realization.
    Future,
    /// A second realization with its own seed.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecast {
    Weighted,
    MaxWeight,
}

/// One line of the long-format results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub target: Target,
    pub forecast: Forecast,
    pub states: usize,
    pub mse: f64,
}

/// Everything one replicate produced.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub rows: Vec<BenchRow>,
    pub training: Field,
    pub mixed: ModelArtifact,
    pub hard: ModelArtifact,
}

impl Replicate {
    pub fn mse(&self, method: Method, target: Target, forecast: Forecast) -> f64 {
        self.rows
            .iter()
            .find(|r| r.method == method && r.target == target && r.forecast == forecast)
            .map(|r| r.mse)
            .expect("every combination is scored")
    }
}

fn simulated(config: &RunConfig, seed: u64) -> CliResult<Field> {
    let sim = simulate_true(&config.simulate.ca_config(seed))?;
    let g = config.cone.apply(*sim.field.geometry());
    Ok(sim.field.with_geometry(g)?)
}

/// Runs replicate `index`; its seeds derive from the master seed only.
pub fn run_replicate(config: &RunConfig, index: usize) -> CliResult<Replicate> {
    let seed = derive_seed(config.seed, &[index as u64]);
    let training = simulated(config, seed)?;
    let independent = simulated(config, derive_seed(seed, &[1]))?;
    let cones = extract_light_cones(&training)?;
    let (train, test) = split_train_test(&cones, config.fit.split)?;
    let from_time = split_time(training.geometry(), config.fit.split)?;

    let mut rows = Vec::with_capacity(8);
    let mut models = Vec::with_capacity(2);
    for (method, mode) in [(Method::Mixed, FitMode::Mixed), (Method::Hard, FitMode::Hard)] {
        let fit_config = lightcone::engine::FitConfig {
            mode,
            ..config.fit.fit_config(seed)
        };
        let model = fit(&train, &test, &fit_config)?;
        for (target, field, start) in [
            (Target::Future, &training, from_time),
            (Target::Independent, &independent, 0),
        ] {
            for (forecast, kind) in [
                (Forecast::Weighted, ForecastKind::Weighted),
                (Forecast::MaxWeight, ForecastKind::MaxWeight),
            ] {
                rows.push(BenchRow {
                    replicate: index,
                    seed,
                    method,
                    target,
                    forecast,
                    states: model.selection.states,
                    mse: one_step_forecasts(&model, field, start, kind)?.mse,
                });
            }
        }
        log::info!(
            "replicate {index} {method:?}: K*={} out-MSE={:.4}",
            model.selection.states,
            model.selection.out_of_sample_mse
        );
        models.push(model);
    }
    let hard = models.pop().expect("two fits");
    let mixed = models.pop().expect("two fits");
    Ok(Replicate {
        rows,
        training,
        mixed,
        hard,
    })
}

/// Runs every replicate, in parallel up to the configured thread count.
pub fn run_replicates(config: &RunConfig) -> CliResult<Vec<Replicate>> {
    (0..config.bench.replicates)
        .into_par_iter()
        .map(|i| run_replicate(config, i))
        .collect()
}

pub fn write_results(path: &Path, rows: &[BenchRow]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// The `bench` command: results table, per-replicate traces, resolved config.
pub fn bench(config: &RunConfig, out: &Path) -> CliResult<Vec<BenchRow>> {
    config.validate()?;
    if !out.is_dir() {
        return Err(CliError::io(
            out,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let replicates = run_replicates(config)?;
    let mut rows = Vec::new();
    for (i, rep) in replicates.iter().enumerate() {
        let dir = out.join(format!("replicate-{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (name, model) in [("trace_mixed.csv", &rep.mixed), ("trace_hard.csv", &rep.hard)] {
            let path = dir.join(name);
            fs::write(&path, model.trace.to_csv()).map_err(|e| CliError::io(&path, e))?;
        }
        rows.extend(rep.rows.iter().cloned());
    }
    write_results(&out.join(RESULTS_CSV), &rows)?;
    config.save(out)?;
    Ok(rows)
}
