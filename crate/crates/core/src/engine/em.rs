//! The EM loop: E-step, approximate M-step, held-out evaluation, temporary
//! convergence, merging, and selection of the best weight matrix.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{l1_from_densities, softmax_in_place, EvalGrid, KdeComponent};
use crate::forecast;
use crate::rng;
use crate::stfield::LightConeSet;
use crate::{Error, Result};

use super::ensemble::{build_ensemble_with, flc_values, state_kde, MASS_FLOOR};
use super::kmeans::{init_weights, InitMode};
use super::trace::{FitTrace, IterationRecord, MergeRecord, RunSummary, Selection};
use super::{ModelArtifact, StateEnsemble, WeightMatrix};

/// Relative slack under which two merge distances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Soft posterior weights.
    #[default]
    Mixed,
    /// Each E-step row replaced by a one-hot vector at its argmax.
    Hard,
}

/// Which state weights the held-out MSE uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionWeights {
    /// Weights from the past cone only, as at forecast time.
    #[default]
    PlcOnly,
    /// Posterior weights that also condition on the observed value.
    FlcConditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k_max: usize,
    /// Convergence threshold on `||W(n) - W(n-1)||_F / sqrt(N)`.
    pub delta: f64,
    /// Iteration budget per run, counted across merges.
    pub max_iterations: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub mode: FitMode,
    pub selection: SelectionWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_max: 15,
            delta: 1e-3,
            max_iterations: 1000,
            n_runs: 10,
            seed: 0,
            mode: FitMode::Mixed,
            selection: SelectionWeights::PlcOnly,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::domain("k_max must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::domain("delta must be positive"));
        }
        if self.max_iterations == 0 || self.n_runs == 0 {
            return Err(Error::domain("max_iterations and n_runs must be positive"));
        }
        Ok(())
    }
}

/// E-step result.
#[derive(Debug, Clone)]
pub struct EStep {
    pub weights: WeightMatrix,
    /// Rows where every state had zero likelihood; these were set uniform.
    pub underflow_rows: usize,
}

/// Posterior state weights given both past cone and present value.
pub fn e_step(cones: &LightConeSet, ensemble: &StateEnsemble) -> Result<EStep> {
    let values = flc_values(cones)?;
    let densities = ensemble.flc_densities(&values);
    e_step_with(cones, ensemble, &densities)
}

/// E-step from precomputed `densities[j][i] = f_j(x_i)`.
pub(crate) fn e_step_with(
    cones: &LightConeSet,
    ensemble: &StateEnsemble,
    densities: &[Vec<f64>],
) -> Result<EStep> {
    let plc_ll = plc_loglik(cones, ensemble)?;
    Ok(e_step_cached(ensemble, densities, &plc_ll))
}

/// `ln N(plc_i; mu_j, Sigma_j)` for every state and row, state-major.
pub(crate) fn plc_loglik(cones: &LightConeSet, ensemble: &StateEnsemble) -> Result<Vec<Vec<f64>>> {
    if cones.plc_dim() != ensemble.plc_dim() {
        return Err(Error::domain(format!(
            "cones have past dimension {}, ensemble {}",
            cones.plc_dim(),
            ensemble.plc_dim()
        )));
    }
    Ok(ensemble
        .states()
        .iter()
        .map(|s| {
            let mut out = vec![0.0; cones.len()];
            s.plc.logpdf_rows(cones.plc(), &mut out);
            out
        })
        .collect())
}

fn e_step_cached(ensemble: &StateEnsemble, densities: &[Vec<f64>], plc_ll: &[Vec<f64>]) -> EStep {
    let k = ensemble.len();
    let n = plc_ll.first().map_or(0, Vec::len);
    let log_priors: Vec<f64> = ensemble.priors().iter().map(|p| p.ln()).collect();
    let mut entries = vec![0.0; n * k];
    let mut underflow_rows = 0;
    let mut logw = vec![0.0; k];
    for (i, row) in entries.chunks_exact_mut(k).enumerate() {
        for j in 0..k {
            logw[j] = densities[j][i].ln() + plc_ll[j][i] + log_priors[j];
        }
        normalize_log_weights(&logw, row, &mut underflow_rows);
    }
    EStep {
        weights: WeightMatrix::from_raw(n, k, entries).expect("shape is consistent"),
        underflow_rows,
    }
}

/// Writes `exp(logw - logsumexp(logw))` into `out`; a row with no finite
/// term becomes uniform.
pub(crate) fn normalize_log_weights(logw: &[f64], out: &mut [f64], underflows: &mut usize) {
    out.copy_from_slice(logw);
    if !softmax_in_place(out) {
        *underflows += 1;
        out.fill(1.0 / logw.len() as f64);
        return;
    }
    // fold the rounding residue into the largest entry
    let sum: f64 = out.iter().sum();
    let top = super::weights::argmax(out);
    out[top] += 1.0 - sum;
}

/// `sum_i sum_j w_ij log f_j(x_i)`, skipping zero weights.
pub fn approx_loglik(cones: &LightConeSet, weights: &WeightMatrix, ensemble: &StateEnsemble) -> Result<f64> {
    let values = flc_values(cones)?;
    approx_loglik_with(weights, &ensemble.flc_densities(&values))
}

pub(crate) fn approx_loglik_with(weights: &WeightMatrix, densities: &[Vec<f64>]) -> Result<f64> {
    if densities.len() != weights.states() || densities.iter().any(|d| d.len() != weights.rows()) {
        return Err(Error::domain("densities do not match the weight matrix"));
    }
    let mut total = 0.0;
    for i in 0..weights.rows() {
        for (j, &w) in weights.row(i).iter().enumerate() {
            if w > 0.0 {
                total += w * densities[j][i].max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(total)
}

/// Mean squared error of past-cone-only point forecasts over `cones`.
pub fn predict_mse(cones: &LightConeSet, ensemble: &StateEnsemble) -> Result<f64> {
    if cones.is_empty() {
        return Err(Error::domain("cannot evaluate MSE on an empty set"));
    }
    let plc_ll = plc_loglik(cones, ensemble)?;
    Ok(predict_mse_cached(cones, ensemble, &plc_ll))
}

fn predict_mse_cached(cones: &LightConeSet, ensemble: &StateEnsemble, plc_ll: &[Vec<f64>]) -> f64 {
    let log_priors: Vec<f64> = ensemble.priors().iter().map(|p| p.ln()).collect();
    let mut weights = vec![0.0; ensemble.len()];
    let mut sse = 0.0;
    for i in 0..cones.len() {
        for (j, w) in weights.iter_mut().enumerate() {
            *w = plc_ll[j][i] + log_priors[j];
        }
        forecast::normalize_log_weights(ensemble, &mut weights);
        let pred: f64 = weights
            .iter()
            .zip(ensemble.states())
            .map(|(w, s)| w * s.flc_mean)
            .sum();
        sse += (cones.flc_row(i)[0] - pred).powi(2);
    }
    sse / cones.len() as f64
}

/// Held-out MSE where each row's weights also condition on its observed value.
pub fn predict_mse_flc_conditioned(cones: &LightConeSet, ensemble: &StateEnsemble) -> Result<f64> {
    if cones.is_empty() {
        return Err(Error::domain("cannot evaluate MSE on an empty set"));
    }
    let post = e_step(cones, ensemble)?.weights;
    let means: Vec<f64> = ensemble.states().iter().map(|s| s.flc_mean).collect();
    let sse: f64 = (0..cones.len())
        .map(|i| {
            let pred: f64 = post.row(i).iter().zip(&means).map(|(w, m)| w * m).sum();
            (cones.flc_row(i)[0] - pred).powi(2)
        })
        .sum();
    Ok(sse / cones.len() as f64)
}

fn held_out_mse(cones: &LightConeSet, ensemble: &StateEnsemble, selection: SelectionWeights) -> Result<f64> {
    match selection {
        SelectionWeights::PlcOnly => predict_mse(cones, ensemble),
        SelectionWeights::FlcConditioned => predict_mse_flc_conditioned(cones, ensemble),
    }
}

/// Index of the lexicographically first pair (j < k) at minimal distance.
fn closest_pair(densities: &[Vec<f64>], grid: &EvalGrid) -> (usize, usize, f64) {
    let k = densities.len();
    let mut best = (0, 1, f64::INFINITY);
    for j in 0..k {
        for m in j + 1..k {
            let d = l1_from_densities(&densities[j], &densities[m], grid);
            if d < best.2 * (1.0 - TIE_TOLERANCE) {
                best = (j, m, d);
            }
        }
    }
    best
}

/// Merges the two states whose present-value densities are closest in L1.
/// The merged column takes the lower index.
pub fn merge_closest(weights: &WeightMatrix, ensemble: &StateEnsemble) -> Result<(WeightMatrix, MergeRecord)> {
    if weights.states() < 2 || ensemble.len() != weights.states() {
        return Err(Error::domain(format!(
            "merging needs at least two states (weights {}, ensemble {})",
            weights.states(),
            ensemble.len()
        )));
    }
    let comps: Vec<&KdeComponent> = ensemble.states().iter().map(|s| &s.flc).collect();
    let grid = EvalGrid::spanning(&comps)?;
    let densities: Vec<Vec<f64>> = comps.iter().map(|c| c.pdf_many(grid.points())).collect();
    let (keep, drop, distance) = closest_pair(&densities, &grid);
    Ok((
        weights.merge_columns(keep, drop)?,
        MergeRecord {
            kept: keep,
            removed: drop,
            distance: Some(distance),
            forced: false,
        },
    ))
}

/// Merges every state below the mass floor into its L1-nearest neighbour
/// (or the heaviest state when it has no mass at all).
pub(crate) fn resolve_dead_states(
    values: &Arc<[f64]>,
    mut weights: WeightMatrix,
) -> Result<(WeightMatrix, Vec<MergeRecord>)> {
    let mut events = Vec::new();
    while weights.states() > 1 {
        let sums = weights.column_sums();
        let Some(dead) = sums.iter().position(|&m| !(m >= MASS_FLOOR)) else {
            break;
        };
        let labels = weights.hard_labels();
        let kdes: Vec<Option<KdeComponent>> = (0..weights.states())
            .map(|j| state_kde(values, &weights, &labels, j).map(|o| o.map(|(k, _)| k)))
            .collect::<Result<_>>()?;
        let (target, distance) = match &kdes[dead] {
            Some(dead_kde) => {
                let live: Vec<&KdeComponent> = kdes.iter().flatten().collect();
                let grid = EvalGrid::spanning(&live)?;
                let fd = dead_kde.pdf_many(grid.points());
                kdes.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != dead)
                    .filter_map(|(j, k)| k.as_ref().map(|k| (j, k)))
                    .map(|(j, k)| (j, l1_from_densities(&fd, &k.pdf_many(grid.points()), &grid)))
                    .fold((usize::MAX, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
            }
            None => {
                let heaviest = (0..weights.states())
                    .filter(|&j| j != dead)
                    .fold(usize::MAX, |best, j| {
                        if best == usize::MAX || sums[j] > sums[best] {
                            j
                        } else {
                            best
                        }
                    });
                (heaviest, f64::NAN)
            }
        };
        if target == usize::MAX {
            return Err(Error::Invariant("no live state to absorb a dead one".into()));
        }
        let (keep, drop) = (dead.min(target), dead.max(target));
        weights = weights.merge_columns(keep, drop)?;
        events.push(MergeRecord {
            kept: keep,
            removed: drop,
            distance: distance.is_finite().then_some(distance),
            forced: true,
        });
    }
    Ok((weights, events))
}

/// Best candidate seen in one run.
struct Candidate {
    iteration: usize,
    out_of_sample_mse: f64,
    weights: WeightMatrix,
    ensemble: StateEnsemble,
}

struct RunOutcome {
    records: Vec<IterationRecord>,
    summary: RunSummary,
    best: Candidate,
}

fn run_chain(
    train: &LightConeSet,
    test: &LightConeSet,
    values: &Arc<[f64]>,
    config: &FitConfig,
    run: usize,
) -> Result<RunOutcome> {
    let init = if run == 0 {
        InitMode::KMeansPP
    } else {
        InitMode::Random
    };
    let mut rng = rng::stream(config.seed, &[run as u64]);
    let k_start = config.k_max.min(train.len());
    let initial = init_weights(train, k_start, init, &mut rng)?;
    let (mut weights, mut pending_forced) = resolve_dead_states(values, initial)?;
    let mut ensemble = build_ensemble_with(train, values, &weights)?;
    let mut densities = ensemble.flc_densities(values);
    let mut plc_ll = plc_loglik(train, &ensemble)?;
    let threshold = config.delta * (train.len() as f64).sqrt();

    let mut records = Vec::new();
    let mut best: Option<Candidate> = None;
    let mut completed = false;
    for iteration in 1..=config.max_iterations {
        let estep = e_step_cached(&ensemble, &densities, &plc_ll);
        let mut next = match config.mode {
            FitMode::Mixed => estep.weights,
            FitMode::Hard => estep.weights.harden(),
        };
        let (resolved, forced) = resolve_dead_states(values, next)?;
        next = resolved;
        pending_forced.extend(forced);
        debug_assert!(next.validate().is_ok());

        ensemble = build_ensemble_with(train, values, &next)?;
        densities = ensemble.flc_densities(values);
        plc_ll = plc_loglik(train, &ensemble)?;
        let out_mse = held_out_mse(test, &ensemble, config.selection)?;
        let in_mse = predict_mse_cached(train, &ensemble, &plc_ll);
        let loglik = approx_loglik_with(&next, &densities)?;
        let change = next.frobenius_distance(&weights).ok();

        if best.as_ref().is_none_or(|b| out_mse < b.out_of_sample_mse) {
            best = Some(Candidate {
                iteration,
                out_of_sample_mse: out_mse,
                weights: next.clone(),
                ensemble: ensemble.clone(),
            });
        }
        let mut record = IterationRecord {
            run,
            iteration,
            states: next.states(),
            loglik,
            in_sample_mse: in_mse,
            out_of_sample_mse: out_mse,
            weight_change: change,
            merge: None,
            forced_merges: std::mem::take(&mut pending_forced),
            underflow_rows: estep.underflow_rows,
            bandwidth_fallbacks: ensemble.bandwidth_fallbacks(),
            row_sum_error: next.stochastic_error(),
        };
        log::debug!(
            "run {run} iter {iteration}: K={} out-MSE={out_mse:.4} change={change:?}",
            next.states()
        );
        weights = next;

        if change.is_some_and(|c| c < threshold) {
            if weights.states() == 1 {
                records.push(record);
                completed = true;
                break;
            }
            let (merged, event) = merge_closest(&weights, &ensemble)?;
            let (merged, forced) = resolve_dead_states(values, merged)?;
            pending_forced.extend(forced);
            record.merge = Some(event);
            record.row_sum_error = record.row_sum_error.max(merged.stochastic_error());
            weights = merged;
            ensemble = build_ensemble_with(train, values, &weights)?;
            densities = ensemble.flc_densities(values);
            plc_ll = plc_loglik(train, &ensemble)?;
        }
        records.push(record);
    }
    let best = best.ok_or_else(|| Error::Invariant("run recorded no iterations".into()))?;
    Ok(RunOutcome {
        summary: RunSummary {
            run,
            init,
            iterations: records.len(),
            completed,
            best_iteration: best.iteration,
            best_out_of_sample_mse: best.out_of_sample_mse,
        },
        records,
        best,
    })
}

/// Runs `n_runs` independent chains (the first k-means++ initialized, the
/// rest random) and returns the weights with the lowest held-out MSE seen at
/// any iteration of any run.
pub fn fit(train: &LightConeSet, test: &LightConeSet, config: &FitConfig) -> Result<ModelArtifact> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::domain("training and test sets must be non-empty"));
    }
    if train.geometry().past_horizon != test.geometry().past_horizon
        || train.plc_dim() != test.plc_dim()
    {
        return Err(Error::domain("training and test cones have different geometry"));
    }
    let values = flc_values(train)?;
    let outcomes: Vec<RunOutcome> = (0..config.n_runs)
        .into_par_iter()
        .map(|run| run_chain(train, test, &values, config, run))
        .collect::<Result<_>>()?;

    let mut chosen = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.best.out_of_sample_mse < outcomes[chosen].best.out_of_sample_mse {
            chosen = i;
        }
    }
    let mut trace = FitTrace::default();
    let mut best = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        trace.records.extend(o.records);
        trace.runs.push(o.summary);
        if i == chosen {
            best = Some((i, o.best));
        }
    }
    let (run, best) = best.expect("at least one run");
    let truncated = trace.runs.iter().any(|r| !r.completed);
    let selection = Selection {
        run,
        iteration: best.iteration,
        out_of_sample_mse: best.out_of_sample_mse,
        states: best.weights.states(),
    };
    Ok(ModelArtifact::new(
        *train.geometry(),
        config.clone(),
        best.weights,
        best.ensemble,
        values,
        trace,
        selection,
        truncated,
    ))
}

/// The argmax-hardened variant of [`fit`], used as the hard-clustering baseline.
pub fn fit_hard_baseline(train: &LightConeSet, test: &LightConeSet, config: &FitConfig) -> Result<ModelArtifact> {
    let config = FitConfig {
        mode: FitMode::Hard,
        ..config.clone()
    };
    fit(train, test, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{GaussianComponent, WeightedSample1D};
    use crate::engine::StateComponent;
    use crate::stfield::{FieldGeometry, SpaceTime};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cones(plc: Vec<f64>, dim: usize, flc: Vec<f64>) -> LightConeSet {
        let n = flc.len();
        let index = (0..n).map(|i| SpaceTime { site: i, time: 1 }).collect();
        LightConeSet::from_rows(FieldGeometry::new(n.max(3), 2).with_cone(1, 0, 1), plc, dim, flc, index)
            .unwrap()
    }

    /// Hand-built state: isotropic Gaussian past cone, KDE over `(values, weights)`.
    struct Toy {
        mean: Vec<f64>,
        var: f64,
        values: Vec<f64>,
        weights: Vec<f64>,
        h: f64,
        prior: f64,
    }

    fn ensemble(toys: &[Toy]) -> StateEnsemble {
        let states = toys
            .iter()
            .map(|s| {
                let d = s.mean.len();
                let plc = GaussianComponent::from_moments(
                    DVector::from_vec(s.mean.clone()),
                    DMatrix::identity(d, d) * s.var,
                )
                .unwrap();
                let sample = WeightedSample1D::new(s.values.clone().into(), s.weights.clone()).unwrap();
                StateComponent::new(plc, KdeComponent::new(sample, s.h).unwrap(), s.prior, false)
            })
            .collect();
        StateEnsemble::from_states(states).unwrap()
    }

    fn naive_kde(values: &[f64], weights: &[f64], h: f64, x: f64) -> f64 {
        let total: f64 = weights.iter().sum();
        values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (-(x - v).powi(2) / (2.0 * h * h)).exp() / ((2.0 * PI).sqrt() * h))
            .sum::<f64>()
            / total
    }

    fn naive_gauss(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &[f64]) -> f64 {
        let d = mean.len();
        let diff = DVector::from_column_slice(x) - mean;
        let inv = cov.clone().try_inverse().unwrap();
        let q = (diff.transpose() * inv * &diff)[(0, 0)];
        (-0.5 * q).exp() / ((2.0 * PI).powi(d as i32) * cov.determinant()).sqrt()
    }

    /// Posterior rows computed directly as normalized products.
    fn brute_force_bayes(c: &LightConeSet, e: &StateEnsemble) -> Vec<Vec<f64>> {
        (0..c.len())
            .map(|i| {
                let x = c.flc_row(i)[0];
                let p: Vec<f64> = e
                    .states()
                    .iter()
                    .map(|s| {
                        let sample = s.flc.sample();
                        naive_kde(sample.values(), sample.weights(), s.flc.bandwidth(), x)
                            * naive_gauss(s.plc.mean(), s.plc.covariance(), c.plc_row(i))
                            * s.prior
                    })
                    .collect();
                let z: f64 = p.iter().sum();
                p.iter().map(|v| v / z).collect()
            })
            .collect()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, dim: usize) -> (LightConeSet, StateEnsemble) {
        let plc: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let flc: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let toys: Vec<Toy> = raw
            .iter()
            .map(|p| Toy {
                mean: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: rng.random_range(0.5..2.0),
                values: flc.clone(),
                weights: (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
                h: rng.random_range(0.3..1.0),
                prior: p / total,
            })
            .collect();
        (cones(plc, dim, flc), ensemble(&toys))
    }

    fn two_state(means: [f64; 2], flc_centres: [f64; 2]) -> StateEnsemble {
        ensemble(&[
            Toy {
                mean: vec![means[0]],
                var: 1.0,
                values: vec![flc_centres[0]],
                weights: vec![1.0],
                h: 1.0,
                prior: 0.5,
            },
            Toy {
                mean: vec![means[1]],
                var: 1.0,
                values: vec![flc_centres[1]],
                weights: vec![1.0],
                h: 1.0,
                prior: 0.5,
            },
        ])
    }

    #[test]
    fn e_step_single_state_is_certain() {
        let c = cones(vec![0.1, -3.0, 2.0], 1, vec![0.5, 1.0, -1.0]);
        let e = ensemble(&[Toy {
            mean: vec![0.0],
            var: 1.0,
            values: vec![0.0, 1.0],
            weights: vec![1.0, 1.0],
            h: 0.5,
            prior: 1.0,
        }]);
        let w = e_step(&c, &e).unwrap().weights;
        assert!(w.entries().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn e_step_mirror_symmetric_query_is_even() {
        let c = cones(vec![0.0], 1, vec![0.0]);
        let w = e_step(&c, &two_state([-1.0, 1.0], [-2.0, 2.0])).unwrap().weights;
        assert_relative_eq!(w.get(0, 0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(w.get(0, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn e_step_matches_bayes_on_twenty_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (c, e) = random_instance(&mut rng, 20, 2, 2);
        let w = e_step(&c, &e).unwrap().weights;
        for (i, row) in brute_force_bayes(&c, &e).iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                assert!((w.get(i, j) - p).abs() < 1e-8, "row {i} state {j}");
            }
        }
    }

    #[test]
    fn e_step_underflow_row_becomes_uniform() {
        // the query sits ~1e4 bandwidths from every kernel
        let c = cones(vec![0.0], 1, vec![1e4]);
        let step = e_step(&c, &two_state([-1.0, 1.0], [0.0, 0.5])).unwrap();
        assert_eq!(step.underflow_rows, 1);
        assert_eq!(step.weights.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn loglik_examples() {
        let e = ensemble(&[Toy {
            mean: vec![0.0],
            var: 1.0,
            values: vec![0.0],
            weights: vec![1.0],
            h: 1.0,
            prior: 1.0,
        }]);
        let one = cones(vec![0.0], 1, vec![0.0]);
        let w = WeightMatrix::one_hot(&[0], 1).unwrap();
        assert_relative_eq!(approx_loglik(&one, &w, &e).unwrap(), -0.5 * (2.0 * PI).ln(), epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, e) = random_instance(&mut rng, 15, 3, 2);
        let w = e_step(&c, &e).unwrap().weights;
        let single = approx_loglik(&c, &w, &e).unwrap();
        let mut plc = c.plc().to_vec();
        plc.extend_from_slice(c.plc());
        let mut flc = c.flc().to_vec();
        flc.extend_from_slice(c.flc());
        let doubled = cones(plc, 2, flc);
        let mut entries = w.entries().to_vec();
        entries.extend_from_slice(w.entries());
        let w2 = WeightMatrix::new(30, 3, entries).unwrap();
        assert_relative_eq!(approx_loglik(&doubled, &w2, &e).unwrap(), 2.0 * single, max_relative = 1e-12);
    }

    #[test]
    fn loglik_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, e) = random_instance(&mut rng, 40, 3, 3);
        let w = e_step(&c, &e).unwrap().weights;
        let mut naive = 0.0;
        for i in 0..c.len() {
            for (j, s) in e.states().iter().enumerate() {
                let sample = s.flc.sample();
                let f = naive_kde(sample.values(), sample.weights(), s.flc.bandwidth(), c.flc_row(i)[0]);
                naive += w.get(i, j) * f.ln();
            }
        }
        assert!((approx_loglik(&c, &w, &e).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn predict_mse_examples() {
        let exact = ensemble(&[Toy {
            mean: vec![0.0],
            var: 1.0,
            values: vec![2.0],
            weights: vec![1.0],
            h: 0.3,
            prior: 1.0,
        }]);
        assert_eq!(predict_mse(&cones(vec![0.0, 5.0], 1, vec![2.0, 2.0]), &exact).unwrap(), 0.0);

        // a zero predictor against standard normal targets
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let targets: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let zero = ensemble(&[Toy {
            mean: vec![0.0],
            var: 1.0,
            values: vec![-1.0, 1.0],
            weights: vec![1.0, 1.0],
            h: 0.3,
            prior: 1.0,
        }]);
        let mse = predict_mse(&cones(vec![0.0; n], 1, targets), &zero).unwrap();
        // the sample variance of a squared normal is 2
        assert!((mse - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "{mse}");

        assert!(predict_mse(&cones(vec![], 1, vec![]), &zero).is_err());
    }

    fn unit_state(centre: f64, mass: f64) -> Toy {
        Toy {
            mean: vec![0.0],
            var: 1.0,
            values: vec![centre],
            weights: vec![1.0],
            h: 1.0,
            prior: mass,
        }
    }

    fn uniform_weights(n: usize, k: usize) -> WeightMatrix {
        WeightMatrix::new(n, k, vec![1.0 / k as f64; n * k]).unwrap()
    }

    #[test]
    fn merge_picks_duplicates() {
        let e = ensemble(&[unit_state(-3.0, 0.3), unit_state(2.0, 0.3), unit_state(2.0, 0.4)]);
        let (_, rec) = merge_closest(&uniform_weights(4, 3), &e).unwrap();
        assert_eq!((rec.kept, rec.removed), (1, 2));
        assert!(rec.distance.unwrap() < 1e-12);
    }

    #[test]
    fn merge_tie_breaks_to_first_pair_and_sums_mass() {
        let e = ensemble(&[unit_state(-5.0, 0.3), unit_state(0.0, 0.3), unit_state(5.0, 0.4)]);
        let w = WeightMatrix::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap();
        let (merged, rec) = merge_closest(&w, &e).unwrap();
        assert_eq!((rec.kept, rec.removed), (0, 1));
        assert_eq!(merged.states(), 2);
        let before = w.column_sums();
        let after = merged.column_sums();
        assert_relative_eq!(after[0], before[0] + before[1], epsilon = 1e-15);
        assert_relative_eq!(after[1], before[2], epsilon = 1e-15);
        merged.validate().unwrap();

        let e = ensemble(&[unit_state(-5.0, 0.3), unit_state(0.0, 0.3), unit_state(4.0, 0.4)]);
        let (_, rec) = merge_closest(&w, &e).unwrap();
        assert_eq!((rec.kept, rec.removed), (1, 2));
    }

    #[test]
    fn merge_needs_two_states() {
        let e = ensemble(&[unit_state(0.0, 1.0)]);
        assert!(merge_closest(&uniform_weights(2, 1), &e).is_err());
    }

    /// Two PLC clusters whose present values have different means.
    fn clustered(seed: u64, n: usize) -> LightConeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plc = Vec::new();
        let mut flc = Vec::new();
        for i in 0..n {
            let s = if i % 2 == 0 { -2.0 } else { 2.0 };
            plc.push(s + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5);
            plc.push(s + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5);
            flc.push(s + rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        cones(plc, 2, flc)
    }

    fn small_config(mode: FitMode) -> FitConfig {
        FitConfig {
            k_max: 4,
            max_iterations: 200,
            n_runs: 3,
            seed: 7,
            mode,
            ..FitConfig::default()
        }
    }

    #[test]
    fn fit_is_deterministic_and_selects_its_minimum() {
        let (train, test) = (clustered(1, 200), clustered(2, 200));
        let a = fit(&train, &test, &small_config(FitMode::Mixed)).unwrap();
        let b = fit(&train, &test, &small_config(FitMode::Mixed)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let min = a
            .trace
            .records
            .iter()
            .map(|r| r.out_of_sample_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.selection.out_of_sample_mse, min);
        assert_eq!(predict_mse(&test, &a.ensemble).unwrap(), min);
    }

    #[test]
    fn fit_merges_one_state_at_a_time() {
        let (train, test) = (clustered(3, 200), clustered(4, 200));
        let model = fit(&train, &test, &small_config(FitMode::Mixed)).unwrap();
        for run in 0..3 {
            let recs: Vec<_> = model.trace.run_records(run).collect();
            assert!(recs.iter().all(|r| r.row_sum_error <= 1e-12));
            for pair in recs.windows(2) {
                let lost = 1 + usize::from(pair[0].merge.is_some()) + pair[1].forced_merges.len();
                assert!(pair[1].states <= pair[0].states);
                assert_eq!(pair[0].states + 1 - pair[1].states, lost);
            }
            let summary = &model.trace.runs[run];
            if summary.completed {
                assert_eq!(recs.last().unwrap().states, 1);
            }
        }
    }

    #[test]
    fn hard_fit_is_one_hot_and_k1_is_identical() {
        let (train, test) = (clustered(5, 150), clustered(6, 150));
        let hard = fit_hard_baseline(&train, &test, &small_config(FitMode::Mixed)).unwrap();
        assert!(hard.weights.is_one_hot());
        assert_eq!(hard.config.mode, FitMode::Hard);

        let k1 = |mode| FitConfig {
            k_max: 1,
            ..small_config(mode)
        };
        let m = fit(&train, &test, &k1(FitMode::Mixed)).unwrap();
        let h = fit(&train, &test, &k1(FitMode::Hard)).unwrap();
        assert_eq!(m.weights, h.weights);
        assert_eq!(m.selection, h.selection);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let c = clustered(1, 10);
        let bad = FitConfig {
            k_max: 0,
            ..FitConfig::default()
        };
        assert!(fit(&c, &c, &bad).is_err());
        assert!(fit(&c, &cones(vec![], 2, vec![]), &FitConfig::default()).is_err());
        assert!(fit(&c, &cones(vec![0.0], 1, vec![0.0]), &FitConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn e_step_equals_bayes(seed in any::<u64>(), n in 1usize..=50, k in 1usize..=3, dim in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, e) = random_instance(&mut rng, n, k, dim);
            let w = e_step(&c, &e).unwrap().weights;
            prop_assert!(w.validate().is_ok());
            for (i, row) in brute_force_bayes(&c, &e).iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    prop_assert!((w.get(i, j) - p).abs() < 1e-8);
                }
            }
        }
    }
}
