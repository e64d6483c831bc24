use serde::{Deserialize, Serialize};

use super::kmeans::InitMode;

/// One merge of state `removed` into state `kept` (indices before the merge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub kept: usize,
    pub removed: usize,
    /// L1 distance between the two present-value densities; absent when a
    /// massless state was absorbed.
    pub distance: Option<f64>,
    /// Triggered by the mass floor rather than by temporary convergence.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub run: usize,
    /// 1-based, cumulative across merges within a run.
    pub iteration: usize,
    /// Number of states after this iteration's E- and M-step.
    pub states: usize,
    pub loglik: f64,
    pub in_sample_mse: f64,
    pub out_of_sample_mse: f64,
    /// Frobenius norm of the weight update; absent when K changed.
    pub weight_change: Option<f64>,
    /// Convergence merge applied after this iteration.
    pub merge: Option<MergeRecord>,
    /// Mass-floor merges applied during this iteration.
    pub forced_merges: Vec<MergeRecord>,
    pub underflow_rows: usize,
    pub bandwidth_fallbacks: usize,
    /// Largest row-sum error of the weights produced this iteration,
    /// including after any merge.
    pub row_sum_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub init: InitMode,
    pub iterations: usize,
    /// Reached K = 1 and converged there within the iteration budget.
    pub completed: bool,
    pub best_iteration: usize,
    pub best_out_of_sample_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitTrace {
    pub records: Vec<IterationRecord>,
    pub runs: Vec<RunSummary>,
}

impl FitTrace {
    pub fn run_records(&self, run: usize) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.run == run)
    }

    /// Trace as CSV: run, iteration, K, loglik, in/out MSE, merge flag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,iteration,states,loglik,in_sample_mse,out_of_sample_mse,weight_change,merged,forced_merges,merge_distance,row_sum_error\n",
        );
        for r in &self.records {
            let change = r.weight_change.map(|c| c.to_string()).unwrap_or_default();
            let distance = r
                .merge
                .as_ref()
                .and_then(|m| m.distance)
                .map(|d| d.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.run,
                r.iteration,
                r.states,
                r.loglik,
                r.in_sample_mse,
                r.out_of_sample_mse,
                change,
                u8::from(r.merge.is_some()),
                r.forced_merges.len(),
                distance,
                r.row_sum_error
            ));
        }
        out
    }
}

/// Where the returned weight matrix came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub run: usize,
    pub iteration: usize,
    pub out_of_sample_mse: f64,
    pub states: usize,
}
