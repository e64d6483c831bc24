//! The command implementations, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use lightcone::dynamics::{latent_state, patches_slices, simulate_from_model, simulate_true};
use lightcone::engine::{fit as fit_model, ModelArtifact};
use lightcone::forecast::{one_step_forecasts, ForecastKind, PredictiveMixture};
use lightcone::stfield::{
    extract_light_cones, read_field, split_time, split_train_test, write_field, write_matrix_csv, Field,
};

use crate::config::{InitialKind, RunConfig};
use crate::error::{CliError, CliResult};

pub const FIELD_CSV: &str = "field.csv";
pub const FIELD_META: &str = "field.json";
pub const LATENT_CSV: &str = "latent.csv";
pub const MODEL_JSON: &str = "model.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const STATES_CSV: &str = "states.csv";
pub const FORECAST_CSV: &str = "forecast.csv";
pub const RESIDUAL_CSV: &str = "residual.csv";
pub const MSE_JSON: &str = "mse.json";
pub const DENSITY_CSV: &str = "density.csv";

/// Points at which each requested predictive density is evaluated.
pub const DENSITY_GRID_POINTS: usize = 512;

/// A field CSV and its geometry sidecar.
#[derive(Debug, Clone)]
pub struct FieldInput {
    pub csv: PathBuf,
    /// Defaults to the CSV path with a `.json` extension.
    pub meta: Option<PathBuf>,
}

impl FieldInput {
    pub fn new(csv: impl Into<PathBuf>) -> Self {
        FieldInput {
            csv: csv.into(),
            meta: None,
        }
    }

    pub fn meta_path(&self) -> PathBuf {
        self.meta.clone().unwrap_or_else(|| self.csv.with_extension("json"))
    }

    /// Reads the field and applies the configured cone.
    pub fn load(&self, config: &RunConfig) -> CliResult<Field> {
        let field = read_field(&self.csv, &self.meta_path())?;
        let geometry = config.cone.apply(*field.geometry());
        geometry.validate()?;
        Ok(field.with_geometry(geometry)?)
    }
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes a matrix whose missing cells become empty CSV fields.
fn write_sparse_csv<T: ToString>(path: &Path, m: &DMatrix<Option<T>>) -> CliResult<()>
where
    T: nalgebra::Scalar,
{
    write_matrix_csv(path, m.nrows(), m.ncols(), |r, c| {
        m[(r, c)].as_ref().map(T::to_string).unwrap_or_default()
    })?;
    Ok(())
}

fn finite_or_none(m: &DMatrix<f64>) -> DMatrix<Option<f64>> {
    m.map(|v| v.is_finite().then_some(v))
}

/// Simulates the test automaton into `out`.
pub fn simulate(config: &RunConfig, out: &Path) -> CliResult<()> {
    config.validate()?;
    require_dir(out)?;
    let sim = simulate_true(&config.simulate.ca_config(config.seed))?;
    let geometry = config.cone.apply(*sim.field.geometry());
    let field = sim.field.with_geometry(geometry)?;
    write_field(&field, &out.join(FIELD_CSV), &out.join(FIELD_META))?;
    write_sparse_csv(&out.join(LATENT_CSV), &sim.latent)?;
    config.save(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub states: usize,
    pub out_of_sample_mse: f64,
    pub run: usize,
    pub iteration: usize,
    pub truncated: bool,
}

/// Fits a model to the first `split` of the field and writes the artifact,
/// the trace and the estimated state field.
pub fn fit(config: &RunConfig, input: &FieldInput, out: &Path) -> CliResult<FitSummary> {
    config.validate()?;
    require_dir(out)?;
    let field = input.load(config)?;
    let cones = extract_light_cones(&field)?;
    let (train, test) = split_train_test(&cones, config.fit.split)?;
    let model = fit_model(&train, &test, &config.fit.fit_config(config.seed))?;

    model.save(&out.join(MODEL_JSON))?;
    write_text(&out.join(TRACE_CSV), &model.trace.to_csv())?;
    let g = field.geometry();
    let mut states = DMatrix::from_element(g.spatial_size, g.time_steps, None);
    for (st, label) in train.index().iter().zip(model.weights.hard_labels()) {
        states[(st.site, st.time)] = Some(label);
    }
    write_sparse_csv(&out.join(STATES_CSV), &states)?;
    config.save(out)?;
    Ok(FitSummary {
        states: model.selection.states,
        out_of_sample_mse: model.selection.out_of_sample_mse,
        run: model.selection.run,
        iteration: model.selection.iteration,
        truncated: model.truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub mse: f64,
    pub max_weight_mse: f64,
    pub cells: usize,
    /// First 0-based time step scored.
    pub from_time: usize,
}

#[derive(Debug, Serialize)]
struct DensityRow {
    site: usize,
    time: usize,
    x: f64,
    density: f64,
}

/// Predictive densities at 1-based `(site, time)` cells, long format.
fn write_densities(model: &ModelArtifact, field: &Field, cells: &[(usize, usize)], path: &Path) -> CliResult<()> {
    let g = field.geometry();
    let offsets = g.plc_offsets();
    let mut plc = vec![0.0; offsets.len()];
    let mut writer = csv::Writer::from_path(path)?;
    for &(site, time) in cells {
        if site == 0 || time == 0 || site > g.spatial_size || time > g.time_steps {
            return Err(CliError::Usage(format!("density cell {site}:{time} lies outside the field")));
        }
        if !g.has_full_past(site - 1, time - 1) {
            return Err(CliError::Usage(format!("density cell {site}:{time} has no full past cone")));
        }
        field.read_plc(site - 1, time - 1, &offsets, &mut plc);
        let mixture = PredictiveMixture::new(&model.ensemble, &plc)?;
        let grid = mixture.grid(DENSITY_GRID_POINTS)?;
        for (&x, density) in grid.points().iter().zip(mixture.pdf_many(grid.points())) {
            writer.serialize(DensityRow { site, time, x, density })?;
        }
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// One-step forecasts of every cell with a full past cone, or only of the
/// test block when `split` is given. Predictive densities are written for
/// each of `density_cells` (1-based site, time).
pub fn predict(
    config: &RunConfig,
    model_path: &Path,
    input: &FieldInput,
    split: Option<f64>,
    density_cells: &[(usize, usize)],
    out: &Path,
) -> CliResult<PredictSummary> {
    config.validate()?;
    require_dir(out)?;
    let model = ModelArtifact::load(model_path)?;
    let raw = read_field(&input.csv, &input.meta_path())?;
    let g = raw.geometry();
    if g.spatial_size != model.geometry.spatial_size {
        return Err(CliError::Core(lightcone::Error::Domain(format!(
            "field has {} sites, model was fitted on {}",
            g.spatial_size, model.geometry.spatial_size
        ))));
    }
    // the model's cone is authoritative; only the shape comes from the file
    let geometry = model.geometry.with_time_steps(g.time_steps);
    let field = raw.with_geometry(geometry)?;
    let from_time = match split {
        Some(f) => split_time(field.geometry(), f)?,
        None => 0,
    };
    let weighted = one_step_forecasts(&model, &field, from_time, ForecastKind::Weighted)?;
    let top = one_step_forecasts(&model, &field, from_time, ForecastKind::MaxWeight)?;
    write_sparse_csv(&out.join(FORECAST_CSV), &finite_or_none(&weighted.forecast))?;
    write_sparse_csv(&out.join(RESIDUAL_CSV), &finite_or_none(&weighted.residual))?;
    let summary = PredictSummary {
        mse: weighted.mse,
        max_weight_mse: top.mse,
        cells: weighted.cells,
        from_time,
    };
    if !density_cells.is_empty() {
        write_densities(&model, &field, density_cells, &out.join(DENSITY_CSV))?;
    }
    let json = serde_json::to_string_pretty(&summary).map_err(lightcone::Error::from)?;
    write_text(&out.join(MSE_JSON), &(json + "\n"))?;
    config.save(out)?;
    Ok(summary)
}

/// Latent state of every cell with two earlier slices.
pub fn latent_field(values: &DMatrix<f64>) -> CliResult<DMatrix<Option<i64>>> {
    let mut latent = DMatrix::from_element(values.nrows(), values.ncols(), None);
    for t in 2..values.ncols() {
        for r in 0..values.nrows() {
            latent[(r, t)] = Some(latent_state(values, r, t)?);
        }
    }
    Ok(latent)
}

/// Initial slices for model-driven simulation.
pub fn initial_slices(config: &RunConfig, spatial_size: usize, past_horizon: usize) -> CliResult<DMatrix<f64>> {
    let g = &config.generate;
    match g.initial {
        InitialKind::Zeros => Ok(DMatrix::zeros(spatial_size, past_horizon.max(2))),
        InitialKind::Patches if past_horizon <= 2 => Ok(patches_slices(spatial_size, g.first_positive)),
        InitialKind::Patches => Err(CliError::Usage(format!(
            "the patches condition has two slices but the model needs {past_horizon}"
        ))),
    }
}

/// Simulates a new realization from a fitted model.
pub fn generate(config: &RunConfig, model_path: &Path, out: &Path) -> CliResult<Field> {
    config.validate()?;
    require_dir(out)?;
    let model = ModelArtifact::load(model_path)?;
    let initial = initial_slices(config, model.geometry.spatial_size, model.geometry.past_horizon)?;
    let field = simulate_from_model(&model, &initial, config.generate.t_max, config.seed)?;
    write_field(&field, &out.join(FIELD_CSV), &out.join(FIELD_META))?;
    if field.geometry().spatial_size >= lightcone::dynamics::MIN_SPATIAL_SIZE {
        write_sparse_csv(&out.join(LATENT_CSV), &latent_field(field.values())?)?;
    }
    config.save(out)?;
    Ok(field)
}
