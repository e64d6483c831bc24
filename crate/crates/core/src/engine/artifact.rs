use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::{GaussianComponent, KdeComponent, WeightedSample1D};
use crate::stfield::{FieldGeometry, LightConeSet};
use crate::{Error, Result};

use super::em::predict_mse;
use super::{FitConfig, FitTrace, Selection, StateComponent, StateEnsemble, WeightMatrix};

pub const FORMAT_VERSION: u32 = 1;

/// A fitted model: the selected weights, the state models they induce, and
/// everything needed to reproduce or audit the fit.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub geometry: FieldGeometry,
    pub config: FitConfig,
    pub weights: WeightMatrix,
    pub ensemble: StateEnsemble,
    pub training_flc: Arc<[f64]>,
    pub trace: FitTrace,
    pub selection: Selection,
    /// Some run hit the iteration budget before reaching a single state.
    pub truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct StateParams {
    mean: Vec<f64>,
    /// Row-major.
    covariance: Vec<f64>,
    bandwidth: f64,
    effective_size: f64,
    prior: f64,
    bandwidth_fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    format_version: u32,
    geometry: FieldGeometry,
    config: FitConfig,
    seed: u64,
    selection: Selection,
    truncated: bool,
    weights: WeightMatrix,
    states: Vec<StateParams>,
    training_flc: Vec<f64>,
    trace: FitTrace,
}

impl ModelArtifact {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        geometry: FieldGeometry,
        config: FitConfig,
        weights: WeightMatrix,
        ensemble: StateEnsemble,
        training_flc: Arc<[f64]>,
        trace: FitTrace,
        selection: Selection,
        truncated: bool,
    ) -> Self {
        ModelArtifact {
            geometry,
            config,
            weights,
            ensemble,
            training_flc,
            trace,
            selection,
            truncated,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn states(&self) -> usize {
        self.ensemble.len()
    }

    /// Past-cone-only forecast MSE of this model on `cones`.
    pub fn mse(&self, cones: &LightConeSet) -> Result<f64> {
        predict_mse(cones, &self.ensemble)
    }

    pub fn to_json(&self) -> Result<String> {
        let states = self
            .ensemble
            .states()
            .iter()
            .map(|s| StateParams {
                mean: s.plc.mean().iter().copied().collect(),
                covariance: s.plc.covariance().transpose().iter().copied().collect(),
                bandwidth: s.flc.bandwidth(),
                effective_size: s.effective_size(),
                prior: s.prior,
                bandwidth_fallback: s.bandwidth_fallback,
            })
            .collect();
        let file = ArtifactFile {
            format_version: FORMAT_VERSION,
            geometry: self.geometry,
            config: self.config.clone(),
            seed: self.config.seed,
            selection: self.selection.clone(),
            truncated: self.truncated,
            weights: self.weights.clone(),
            states,
            training_flc: self.training_flc.to_vec(),
            trace: self.trace.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::Format(format!("unsupported model format version {v}"))),
            None => return Err(Error::Format("model file lacks a format_version".into())),
        }
        let file: ArtifactFile = serde_json::from_value(value)?;
        file.weights.validate()?;
        let n = file.weights.rows();
        if file.training_flc.len() != n || file.states.len() != file.weights.states() {
            return Err(Error::Format("model arrays have inconsistent sizes".into()));
        }
        let values: Arc<[f64]> = file.training_flc.into();
        let states = file
            .states
            .into_iter()
            .enumerate()
            .map(|(j, p)| {
                let d = p.mean.len();
                if p.covariance.len() != d * d {
                    return Err(Error::Format(format!("state {j} covariance has wrong size")));
                }
                let plc = GaussianComponent::from_moments(
                    DVector::from_vec(p.mean),
                    DMatrix::from_row_slice(d, d, &p.covariance),
                )?;
                let sample = WeightedSample1D::new(values.clone(), file.weights.column(j))?;
                let flc = KdeComponent::new(sample, p.bandwidth)?;
                Ok(StateComponent::new(plc, flc, p.prior, p.bandwidth_fallback))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelArtifact {
            geometry: file.geometry,
            config: file.config,
            weights: file.weights,
            ensemble: StateEnsemble::from_states(states)?,
            training_flc: values,
            trace: file.trace,
            selection: file.selection,
            truncated: file.truncated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
impl ModelArtifact {
    /// Wraps a hand-built ensemble; the weights and trace are placeholders.
    pub(crate) fn from_ensemble(geometry: FieldGeometry, ensemble: StateEnsemble) -> Self {
        let k = ensemble.len();
        ModelArtifact {
            geometry,
            config: FitConfig::default(),
            weights: WeightMatrix::new(1, k, vec![1.0 / k as f64; k]).unwrap(),
            training_flc: vec![0.0].into(),
            trace: FitTrace::default(),
            selection: Selection {
                run: 0,
                iteration: 0,
                out_of_sample_mse: f64::NAN,
                states: k,
            },
            truncated: false,
            ensemble,
        }
    }
}
