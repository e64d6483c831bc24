//! Forecasts from a fitted model given only a past cone.
//!
//! State weights condition on the past cone alone (the present value is what
//! is being predicted), so they come from the past-cone Gaussians and the
//! priors. The point forecast is the weight-averaged mean of the states'
//! present-value KDEs.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::density::{softmax_in_place, EvalGrid, KdeComponent};
use crate::engine::{ModelArtifact, StateEnsemble};
use crate::stfield::{extract_light_cones, Field, FieldGeometry};
use crate::{Error, Result};

/// Predictive distribution of the present value for one past cone.
#[derive(Debug, Clone)]
pub struct PredictiveMixture<'a> {
    weights: Vec<f64>,
    ensemble: &'a StateEnsemble,
}

impl<'a> PredictiveMixture<'a> {
    pub fn new(ensemble: &'a StateEnsemble, plc: &[f64]) -> Result<Self> {
        Ok(PredictiveMixture {
            weights: plc_state_weights(ensemble, plc)?,
            ensemble,
        })
    }

    pub fn state_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.ensemble.states())
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, s)| w * s.flc.pdf(x))
            .sum()
    }

    /// Density at each grid point; same as mapping [`Self::pdf`].
    pub fn pdf_many(&self, xs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; xs.len()];
        for (w, s) in self.weights.iter().zip(self.ensemble.states()) {
            if *w > 0.0 {
                for (o, d) in out.iter_mut().zip(s.flc.pdf_many(xs)) {
                    *o += w * d;
                }
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.ensemble.states())
            .map(|(w, s)| w * s.flc_mean)
            .sum()
    }

    /// Index of the highest-weight state; ties go to the lower index.
    pub fn top_state(&self) -> usize {
        crate::engine::argmax_index(&self.weights)
    }

    /// Mean of the single highest-weight state.
    pub fn max_weight_mean(&self) -> f64 {
        self.ensemble.states()[self.top_state()].flc_mean
    }

    /// A grid covering every component with room for the kernel tails.
    pub fn grid(&self, points: usize) -> Result<EvalGrid> {
        let comps: Vec<&KdeComponent> = self.ensemble.states().iter().map(|s| &s.flc).collect();
        let span = EvalGrid::spanning(&comps)?;
        let (lo, hi) = (span.points()[0], span.points()[span.points().len() - 1]);
        EvalGrid::uniform(lo, hi, points)
    }
}

fn check_dim(ensemble: &StateEnsemble, plc: &[f64]) -> Result<()> {
    if plc.len() != ensemble.plc_dim() {
        return Err(Error::domain(format!(
            "past cone has {} values, model expects {}",
            plc.len(),
            ensemble.plc_dim()
        )));
    }
    Ok(())
}

/// Fills `weights` with past-cone-only state weights and returns the
/// weighted point forecast. The caller guarantees matching dimensions.
pub(crate) fn weighted_forecast_into(ensemble: &StateEnsemble, plc: &[f64], weights: &mut [f64]) -> f64 {
    fill_state_weights(ensemble, plc, weights);
    weights
        .iter()
        .zip(ensemble.states())
        .map(|(w, s)| w * s.flc_mean)
        .sum()
}

fn fill_state_weights(ensemble: &StateEnsemble, plc: &[f64], weights: &mut [f64]) {
    for (w, s) in weights.iter_mut().zip(ensemble.states()) {
        *w = s.plc.logpdf(plc) + s.prior.ln();
    }
    normalize_log_weights(ensemble, weights);
}

/// Turns `ln N(plc; mu_j, Sigma_j) + ln prior_j` into normalized weights in
/// place.
pub(crate) fn normalize_log_weights(ensemble: &StateEnsemble, weights: &mut [f64]) {
    if !softmax_in_place(weights) {
        // no state explains the cone at all; fall back to the priors
        for (w, s) in weights.iter_mut().zip(ensemble.states()) {
            *w = s.prior;
        }
    }
}

/// `w_j ∝ N(plc; mu_j, Sigma_j) * prior_j`, normalized in log space.
pub fn plc_state_weights(ensemble: &StateEnsemble, plc: &[f64]) -> Result<Vec<f64>> {
    check_dim(ensemble, plc)?;
    let mut w = vec![0.0; ensemble.len()];
    fill_state_weights(ensemble, plc, &mut w);
    Ok(w)
}

pub fn predictive_pdf(ensemble: &StateEnsemble, plc: &[f64], x: f64) -> Result<f64> {
    Ok(PredictiveMixture::new(ensemble, plc)?.pdf(x))
}

/// Weighted-mixture point forecast.
pub fn point_forecast(ensemble: &StateEnsemble, plc: &[f64]) -> Result<f64> {
    check_dim(ensemble, plc)?;
    let mut w = vec![0.0; ensemble.len()];
    Ok(weighted_forecast_into(ensemble, plc, &mut w))
}

/// Forecast by the single most probable state.
pub fn max_weight_forecast(ensemble: &StateEnsemble, plc: &[f64]) -> Result<f64> {
    Ok(PredictiveMixture::new(ensemble, plc)?.max_weight_mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForecastKind {
    #[default]
    Weighted,
    MaxWeight,
}

/// One-step forecasts over a whole field.
#[derive(Debug, Clone)]
pub struct OneStepForecast {
    /// Forecast per cell; NaN where the cell was not scored.
    pub forecast: DMatrix<f64>,
    /// Observed minus forecast; NaN where the cell was not scored.
    pub residual: DMatrix<f64>,
    pub mse: f64,
    pub cells: usize,
}

/// The model's cone shape applied to a field of any length with the
/// model's spatial size.
fn model_geometry_for(model: &ModelArtifact, field: &Field) -> Result<FieldGeometry> {
    let g = field.geometry();
    if g.spatial_size != model.geometry.spatial_size {
        return Err(Error::domain(format!(
            "field has {} sites, model was fitted on {}",
            g.spatial_size, model.geometry.spatial_size
        )));
    }
    Ok(model.geometry.with_time_steps(g.time_steps))
}

/// Forecasts every cell with a fully observed past cone and 0-based time at
/// or after `from_time`.
pub fn one_step_forecasts(
    model: &ModelArtifact,
    field: &Field,
    from_time: usize,
    kind: ForecastKind,
) -> Result<OneStepForecast> {
    let geometry = model_geometry_for(model, field)?;
    let field = field.clone().with_geometry(geometry)?;
    let cones = extract_light_cones(&field)?;
    let ensemble = &model.ensemble;
    if cones.plc_dim() != ensemble.plc_dim() {
        return Err(Error::domain("field cones do not match the model"));
    }
    let (s, t) = (geometry.spatial_size, geometry.time_steps);
    let mut forecast = DMatrix::from_element(s, t, f64::NAN);
    let mut residual = DMatrix::from_element(s, t, f64::NAN);
    let mut weights = vec![0.0; ensemble.len()];
    let mut sse = 0.0;
    let mut cells = 0;
    for (i, st) in cones.index().iter().enumerate() {
        if st.time < from_time {
            continue;
        }
        let plc = cones.plc_row(i);
        let pred = match kind {
            ForecastKind::Weighted => weighted_forecast_into(ensemble, plc, &mut weights),
            ForecastKind::MaxWeight => {
                fill_state_weights(ensemble, plc, &mut weights);
                ensemble.states()[crate::engine::argmax_index(&weights)].flc_mean
            }
        };
        let err = cones.flc_row(i)[0] - pred;
        forecast[(st.site, st.time)] = pred;
        residual[(st.site, st.time)] = err;
        sse += err * err;
        cells += 1;
    }
    if cells == 0 {
        return Err(Error::domain("no cell of the field can be forecast"));
    }
    Ok(OneStepForecast {
        forecast,
        residual,
        mse: sse / cells as f64,
        cells,
    })
}

/// A multi-step rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// The prefix followed by the forecast slices.
    pub field: Field,
    /// Truth minus forecast over the forecast slices (sites x steps).
    pub residuals: Option<DMatrix<f64>>,
}

/// Extends `prefix` by `steps` slices, each forecast from cones that include
/// earlier forecasts. Sites without a full cone (non-periodic edges) get the
/// model's marginal mean.
pub fn forecast_field(
    model: &ModelArtifact,
    prefix: &Field,
    steps: usize,
    truth: Option<&Field>,
) -> Result<Rollout> {
    let geometry = model_geometry_for(model, prefix)?;
    let hp = geometry.past_horizon;
    let t0 = prefix.geometry().time_steps;
    if t0 < hp {
        return Err(Error::domain(format!(
            "prefix of {t0} slices is shorter than the past horizon {hp}"
        )));
    }
    if let Some(truth) = truth {
        let tg = truth.geometry();
        if tg.spatial_size != geometry.spatial_size || tg.time_steps < t0 + steps {
            return Err(Error::domain(format!(
                "ground truth must cover {} sites and {} slices",
                geometry.spatial_size,
                t0 + steps
            )));
        }
    }
    if steps == 0 {
        return Ok(Rollout {
            field: prefix.clone(),
            residuals: truth.map(|_| DMatrix::zeros(geometry.spatial_size, 0)),
        });
    }
    let ensemble = &model.ensemble;
    let marginal: f64 = ensemble.states().iter().map(|s| s.prior * s.flc_mean).sum();
    let s = geometry.spatial_size;
    let full = geometry.with_time_steps(t0 + steps);
    let mut values = DMatrix::zeros(s, t0 + steps);
    values.columns_mut(0, t0).copy_from(prefix.values());
    let mut field = Field::new(full, values)?;
    let offsets = full.plc_offsets();
    for time in t0..t0 + steps {
        let column: Vec<f64> = (0..s)
            .into_par_iter()
            .map_init(
                || (vec![0.0; offsets.len()], vec![0.0; ensemble.len()]),
                |(plc, weights), site| {
                    if !full.has_full_past(site, time) {
                        return marginal;
                    }
                    field.read_plc(site, time, &offsets, plc);
                    weighted_forecast_into(ensemble, plc, weights)
                },
            )
            .collect();
        let mut values = field.into_values();
        values.column_mut(time).copy_from_slice(&column);
        field = Field::new(full, values)?;
    }
    let residuals = truth.map(|truth| {
        DMatrix::from_fn(s, steps, |r, k| truth.get(r, t0 + k) - field.get(r, t0 + k))
    });
    Ok(Rollout { field, residuals })
}
