use std::sync::Arc;

use crate::density::{
    fallback_bandwidth, silverman_bandwidth, GaussianComponent, KdeComponent, WeightedSample1D,
};
use crate::stfield::LightConeSet;
use crate::{Error, Result};

use super::WeightMatrix;

/// States whose effective size falls below this are merged away.
pub const MASS_FLOOR: f64 = 1.0;

/// Models of one predictive state.
#[derive(Debug, Clone)]
pub struct StateComponent {
    /// Past-cone distribution given the state.
    pub plc: GaussianComponent,
    /// Present-value distribution given the state.
    pub flc: KdeComponent,
    /// N̂_j / N.
    pub prior: f64,
    /// Cached mean of `flc`.
    pub flc_mean: f64,
    /// Bandwidth came from the fallback rule, not the hard-assigned pool.
    pub bandwidth_fallback: bool,
}

impl StateComponent {
    pub fn new(plc: GaussianComponent, flc: KdeComponent, prior: f64, bandwidth_fallback: bool) -> Self {
        let flc_mean = flc.mean();
        StateComponent {
            plc,
            flc,
            prior,
            flc_mean,
            bandwidth_fallback,
        }
    }

    pub fn effective_size(&self) -> f64 {
        self.flc.effective_size()
    }
}

#[derive(Debug, Clone)]
pub struct StateEnsemble {
    states: Vec<StateComponent>,
}

impl StateEnsemble {
    pub fn from_states(states: Vec<StateComponent>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::domain("ensemble needs at least one state"));
        }
        let dim = states[0].plc.dim();
        if states.iter().any(|s| s.plc.dim() != dim) {
            return Err(Error::domain("states disagree on past-cone dimension"));
        }
        let total: f64 = states.iter().map(|s| s.prior).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("priors sum to {total}")));
        }
        Ok(StateEnsemble { states })
    }

    pub fn states(&self) -> &[StateComponent] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn plc_dim(&self) -> usize {
        self.states[0].plc.dim()
    }

    pub fn priors(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.prior).collect()
    }

    pub fn bandwidth_fallbacks(&self) -> usize {
        self.states.iter().filter(|s| s.bandwidth_fallback).count()
    }

    /// Each state's present-value density at `queries`, state-major.
    pub fn flc_densities(&self, queries: &[f64]) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.flc.pdf_many(queries)).collect()
    }
}

/// Present values of the training rows; shared by every state's KDE.
pub(crate) fn flc_values(cones: &LightConeSet) -> Result<Arc<[f64]>> {
    if cones.flc_dim() != 1 {
        return Err(Error::domain(
            "only scalar future cones (future horizon 0) can be modelled",
        ));
    }
    Ok(cones.flc().into())
}

/// Indices of states with effective size below [`MASS_FLOOR`].
pub fn dead_states(weights: &WeightMatrix) -> Vec<usize> {
    weights
        .column_sums()
        .iter()
        .enumerate()
        .filter(|(_, &m)| !(m >= MASS_FLOOR))
        .map(|(j, _)| j)
        .collect()
}

/// Bandwidth for state `j` from the rows whose argmax is `j`, falling back to
/// the pooled rule when that subsample is degenerate.
pub(crate) fn state_bandwidth(values: &[f64], labels: &[usize], j: usize) -> (f64, bool) {
    let pool: Vec<f64> = values
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == j)
        .map(|(&v, _)| v)
        .collect();
    match silverman_bandwidth(&pool) {
        Ok(h) => (h, false),
        Err(_) => (fallback_bandwidth(values), true),
    }
}

/// KDE of state `j`'s present values, or `None` when the state has no mass.
pub(crate) fn state_kde(
    values: &Arc<[f64]>,
    weights: &WeightMatrix,
    labels: &[usize],
    j: usize,
) -> Result<Option<(KdeComponent, bool)>> {
    let column = weights.column(j);
    if !(column.iter().sum::<f64>() > 0.0) {
        return Ok(None);
    }
    let (h, fallback) = state_bandwidth(values, labels, j);
    let sample = WeightedSample1D::new(values.clone(), column)?;
    Ok(Some((KdeComponent::new(sample, h)?, fallback)))
}

/// The approximate M-step: weighted Gaussian and weighted KDE per state,
/// priors from column sums.
pub fn build_ensemble(cones: &LightConeSet, weights: &WeightMatrix) -> Result<StateEnsemble> {
    let values = flc_values(cones)?;
    build_ensemble_with(cones, &values, weights)
}

pub(crate) fn build_ensemble_with(
    cones: &LightConeSet,
    values: &Arc<[f64]>,
    weights: &WeightMatrix,
) -> Result<StateEnsemble> {
    if weights.rows() != cones.len() {
        return Err(Error::domain(format!(
            "{} weight rows for {} cones",
            weights.rows(),
            cones.len()
        )));
    }
    let n = weights.rows() as f64;
    let labels = weights.hard_labels();
    let mut states = Vec::with_capacity(weights.states());
    for j in 0..weights.states() {
        let (flc, fallback) = state_kde(values, weights, &labels, j)?
            .ok_or_else(|| Error::domain(format!("state {j} has no mass")))?;
        let column = flc.sample().weights();
        let plc = GaussianComponent::fit(cones.plc(), cones.plc_dim(), column)?;
        let prior = flc.effective_size() / n;
        states.push(StateComponent::new(plc, flc, prior, fallback));
    }
    // rows sum to one only up to rounding; renormalize priors exactly
    let total: f64 = states.iter().map(|s| s.prior).sum();
    for s in &mut states {
        s.prior /= total;
    }
    StateEnsemble::from_states(states)
}
