//! Data generators: the conditional-Gaussian test automaton, whose
//! predictive state is known, and stochastic simulation from a fitted model.
//!
//! Every cell draws from its own generator, derived from the seed and its
//! (time, site) coordinates, so slices can be generated in parallel and the
//! output does not depend on thread scheduling.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::density::KdeSampler;
use crate::engine::ModelArtifact;
use crate::forecast::plc_state_weights;
use crate::rng;
use crate::stfield::{Field, FieldGeometry};
use crate::{Error, Result};

/// Smallest lattice on which the 5-site window does not overlap itself.
pub const MIN_SPATIAL_SIZE: usize = 11;
/// Latent values with magnitude at or beyond this draw from `N(0, 1)`.
pub const STATE_LIMIT: i64 = 4;
/// Width of each block in the patches initial condition.
pub const PATCH_WIDTH: usize = 10;
/// Amplitude of the patches.
pub const PATCH_AMPLITUDE: f64 = 3.0;

const TRUE_STREAM: u64 = 0x7472_7565;
const MODEL_STREAM: u64 = 0x6d6f_6465;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialCondition {
    /// Both initial slices zero.
    #[default]
    Zeros,
    /// Slice 1 is -1; slice 2 alternates blocks of +3 and -3.
    Patches { first_positive: bool },
    /// The two initial slices, sites x 2.
    Custom(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaConfig {
    pub spatial_size: usize,
    /// Slices kept after burn-in.
    pub time_steps: usize,
    /// Leading slices discarded, the two initial slices included.
    pub burn_in: usize,
    pub initial: InitialCondition,
    pub seed: u64,
}

impl Default for CaConfig {
    fn default() -> Self {
        CaConfig {
            spatial_size: 100,
            time_steps: 200,
            burn_in: 100,
            initial: InitialCondition::Zeros,
            seed: 0,
        }
    }
}

impl CaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_size < MIN_SPATIAL_SIZE {
            return Err(Error::domain(format!(
                "the automaton needs at least {MIN_SPATIAL_SIZE} sites, got {}",
                self.spatial_size
            )));
        }
        if self.time_steps == 0 {
            return Err(Error::domain("time_steps must be positive"));
        }
        if let InitialCondition::Custom(m) = &self.initial {
            if m.nrows() != self.spatial_size || m.ncols() != 2 {
                return Err(Error::domain(format!(
                    "custom initial condition must be {}x2, got {}x{}",
                    self.spatial_size,
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("custom initial condition has non-finite values"));
            }
        }
        Ok(())
    }

    fn initial_slices(&self) -> DMatrix<f64> {
        match &self.initial {
            InitialCondition::Zeros => DMatrix::zeros(self.spatial_size, 2),
            InitialCondition::Patches { first_positive } => {
                patches_slices(self.spatial_size, *first_positive)
            }
            InitialCondition::Custom(m) => m.clone(),
        }
    }
}

/// The two patches initial slices: -1 everywhere, then alternating blocks of
/// `±PATCH_AMPLITUDE`, `PATCH_WIDTH` sites wide.
pub fn patches_slices(spatial_size: usize, first_positive: bool) -> DMatrix<f64> {
    DMatrix::from_fn(spatial_size, 2, |r, t| {
        if t == 0 {
            -1.0
        } else {
            let positive = (r / PATCH_WIDTH) % 2 == 0;
            if positive == first_positive {
                PATCH_AMPLITUDE
            } else {
                -PATCH_AMPLITUDE
            }
        }
    })
}

/// `round(mean of 5 sites at t-2 - mean of 3 sites at t-1)`, periodic in
/// space, ties rounded away from zero. `time` is 0-based and must be >= 2.
pub fn latent_state(values: &DMatrix<f64>, site: usize, time: usize) -> Result<i64> {
    let s = values.nrows();
    if time < 2 || time > values.ncols() {
        return Err(Error::domain(format!(
            "latent state needs two earlier slices; got time {time} of {}",
            values.ncols()
        )));
    }
    if s < MIN_SPATIAL_SIZE || site >= s {
        return Err(Error::domain(format!("site {site} invalid on a lattice of {s}")));
    }
    let at = |off: isize, t: usize| values[((site as isize + off).rem_euclid(s as isize) as usize, t)];
    let wide = (-2..=2).map(|o| at(o, time - 2)).sum::<f64>() / 5.0;
    let narrow = (-1..=1).map(|o| at(o, time - 1)).sum::<f64>() / 3.0;
    Ok((wide - narrow).round() as i64)
}

/// The predictive state a latent value maps to: itself when small, else 0.
pub fn predictive_state(latent: i64) -> i64 {
    if latent.abs() < STATE_LIMIT {
        latent
    } else {
        0
    }
}

/// Draws slice `time` from slices `time-1` and `time-2` of `history`.
/// Returns the slice and the latent value of each site.
pub fn step_true(history: &DMatrix<f64>, time: usize, seed: u64) -> Result<(Vec<f64>, Vec<i64>)> {
    let latent = (0..history.nrows())
        .map(|r| latent_state(history, r, time))
        .collect::<Result<Vec<_>>>()?;
    let slice = latent
        .par_iter()
        .enumerate()
        .map(|(r, &d)| {
            let mut g = rng::stream(seed, &[TRUE_STREAM, time as u64, r as u64]);
            let z: f64 = g.sample(StandardNormal);
            predictive_state(d) as f64 + z
        })
        .collect();
    Ok((slice, latent))
}

/// A realization of the automaton with the latent field that generated it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub field: Field,
    /// Latent value per kept cell; `None` for cells that are initial slices.
    pub latent: DMatrix<Option<i64>>,
}

pub fn simulate_true(config: &CaConfig) -> Result<Simulation> {
    config.validate()?;
    let s = config.spatial_size;
    let total = (config.burn_in + config.time_steps).max(2);
    let start = total - config.time_steps;
    let mut values = DMatrix::zeros(s, total);
    values.columns_mut(0, 2).copy_from(&config.initial_slices());
    let mut latent = DMatrix::from_element(s, config.time_steps, None);
    for t in 2..total {
        let (slice, d) = step_true(&values, t, config.seed)?;
        values.column_mut(t).copy_from_slice(&slice);
        if t >= start {
            for (r, d) in d.into_iter().enumerate() {
                latent[(r, t - start)] = Some(d);
            }
        }
    }
    let kept = values.columns(start, config.time_steps).into_owned();
    Ok(Simulation {
        field: Field::new(FieldGeometry::new(s, config.time_steps), kept)?,
        latent,
    })
}

/// Runs the fitted model forward from `initial` (sites x slices, at least
/// the past horizon) for `t_max` further slices. At each cell a state is drawn
/// from the past-cone state weights and a value from that state's KDE.
pub fn simulate_from_model(
    model: &ModelArtifact,
    initial: &DMatrix<f64>,
    t_max: usize,
    seed: u64,
) -> Result<Field> {
    let g = model.geometry;
    if initial.nrows() != g.spatial_size {
        return Err(Error::domain(format!(
            "initial slices have {} sites, model has {}",
            initial.nrows(),
            g.spatial_size
        )));
    }
    if initial.ncols() < g.past_horizon {
        return Err(Error::domain(format!(
            "{} initial slices do not cover the past horizon {}",
            initial.ncols(),
            g.past_horizon
        )));
    }
    let t0 = initial.ncols();
    let geometry = g.with_time_steps(t0 + t_max);
    let mut values = DMatrix::zeros(g.spatial_size, t0 + t_max);
    values.columns_mut(0, t0).copy_from(initial);
    let mut field = Field::new(geometry, values)?;
    if t_max == 0 {
        return Ok(field);
    }

    let states = model.ensemble.states();
    let samplers: Vec<KdeSampler<'_>> = states.iter().map(|s| s.flc.sampler()).collect();
    let priors = WeightedIndex::new(model.ensemble.priors())
        .map_err(|e| Error::Invariant(format!("model priors unusable: {e}")))?;
    let offsets = geometry.plc_offsets();
    for time in t0..t0 + t_max {
        let column = (0..g.spatial_size)
            .into_par_iter()
            .map(|site| {
                let mut cell_rng = rng::stream(seed, &[MODEL_STREAM, time as u64, site as u64]);
                let state = if geometry.has_full_past(site, time) {
                    let mut plc = vec![0.0; offsets.len()];
                    field.read_plc(site, time, &offsets, &mut plc);
                    let w = plc_state_weights(&model.ensemble, &plc)?;
                    WeightedIndex::new(&w)
                        .map_err(|e| Error::Invariant(format!("state weights unusable: {e}")))?
                        .sample(&mut cell_rng)
                } else {
                    priors.sample(&mut cell_rng)
                };
                Ok(samplers[state].draw(&mut cell_rng))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut values = field.into_values();
        values.column_mut(time).copy_from_slice(&column);
        field = Field::new(geometry, values)?;
    }
    Ok(field)
}
