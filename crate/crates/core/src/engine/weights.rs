use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on row sums for a matrix to count as row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// N x K row-stochastic matrix of state memberships, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: usize,
    states: usize,
    entries: Vec<f64>,
}

impl WeightMatrix {
    /// Wraps row-major entries, checking shape and row-stochasticity.
    pub fn new(rows: usize, states: usize, entries: Vec<f64>) -> Result<Self> {
        let w = WeightMatrix::from_raw(rows, states, entries)?;
        w.validate()?;
        Ok(w)
    }

    pub(crate) fn from_raw(rows: usize, states: usize, entries: Vec<f64>) -> Result<Self> {
        if states == 0 {
            return Err(Error::domain("weight matrix needs at least one state"));
        }
        if entries.len() != rows * states {
            return Err(Error::domain(format!(
                "{} entries for a {rows}x{states} weight matrix",
                entries.len()
            )));
        }
        Ok(WeightMatrix {
            rows,
            states,
            entries,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.entries.len() != self.rows * self.states {
            return Err(Error::Invariant("weight matrix shape is inconsistent".into()));
        }
        for i in 0..self.rows {
            let row = self.row(i);
            if row.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::Invariant(format!("row {i} has a negative or non-finite weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Invariant(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Largest `|sum_j w_ij - 1|` over rows; infinite when any entry is
    /// negative or not finite.
    pub fn stochastic_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            let row = self.row(i);
            if row.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }

    /// Boolean matrix with a single 1 per row at `labels[i]`.
    pub fn one_hot(labels: &[usize], states: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= states) {
            return Err(Error::domain(format!("label {bad} out of range for {states} states")));
        }
        let mut entries = vec![0.0; labels.len() * states];
        for (i, &l) in labels.iter().enumerate() {
            entries[i * states + l] = 1.0;
        }
        WeightMatrix::from_raw(labels.len(), states, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.states + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.states..(i + 1) * self.states]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.entries.iter().skip(j).step_by(self.states).copied().collect()
    }

    /// Effective sizes N̂_j.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.states];
        for row in self.entries.chunks_exact(self.states) {
            for (s, w) in sums.iter_mut().zip(row) {
                *s += w;
            }
        }
        sums
    }

    /// Index of the largest weight in row `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.rows).map(|i| self.argmax(i)).collect()
    }

    /// One-hot matrix at each row's argmax.
    pub fn harden(&self) -> WeightMatrix {
        WeightMatrix::one_hot(&self.hard_labels(), self.states).expect("labels are in range")
    }

    pub fn is_one_hot(&self) -> bool {
        self.entries
            .chunks_exact(self.states)
            .all(|row| row.iter().filter(|&&w| w == 1.0).count() == 1 && row.iter().all(|&w| w == 0.0 || w == 1.0))
    }

    /// Adds column `drop` into column `keep` and removes `drop`.
    pub fn merge_columns(&self, keep: usize, drop: usize) -> Result<WeightMatrix> {
        if keep == drop || keep >= self.states || drop >= self.states {
            return Err(Error::domain(format!(
                "cannot merge state {drop} into {keep} with {} states",
                self.states
            )));
        }
        let k = self.states - 1;
        let mut entries = Vec::with_capacity(self.rows * k);
        for row in self.entries.chunks_exact(self.states) {
            for (j, &w) in row.iter().enumerate() {
                if j == drop {
                    continue;
                }
                entries.push(if j == keep { w + row[drop] } else { w });
            }
        }
        WeightMatrix::from_raw(self.rows, k, entries)
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &WeightMatrix) -> Result<f64> {
        if self.rows != other.rows || self.states != other.states {
            return Err(Error::domain(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.states, other.rows, other.states
            )));
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

/// True iff `||current - previous||_F < delta`.
pub fn check_converged(current: &WeightMatrix, previous: &WeightMatrix, delta: f64) -> Result<bool> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::domain("delta must be positive"));
    }
    Ok(current.frobenius_distance(previous)? < delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converged_examples() {
        let a = WeightMatrix::new(2, 2, vec![0.5, 0.5, 0.3, 0.7]).unwrap();
        assert!(check_converged(&a, &a, 1e-300).unwrap());
        let b = WeightMatrix::new(2, 2, vec![0.7, 0.3, 0.3, 0.7]).unwrap();
        // norm = sqrt(2 * 0.04) = 0.283
        assert!(!check_converged(&b, &a, 0.1).unwrap());
        assert!((b.frobenius_distance(&a).unwrap() - 0.08f64.sqrt()).abs() < 1e-12);
        assert!(check_converged(&b, &a, f64::INFINITY).unwrap());
        let c = WeightMatrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(check_converged(&c, &a, 1.0).is_err());
    }

    #[test]
    fn rejects_non_stochastic() {
        assert!(WeightMatrix::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(WeightMatrix::new(1, 2, vec![-0.5, 1.5]).is_err());
        assert!(WeightMatrix::new(1, 0, vec![]).is_err());
    }

    #[test]
    fn merge_adds_columns() {
        let w = WeightMatrix::new(2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let m = w.merge_columns(0, 2).unwrap();
        assert_eq!(m.states(), 2);
        assert_eq!(m.row(0), &[0.7, 0.3]);
        m.validate().unwrap();
        let sums = w.column_sums();
        assert!((m.column_sums()[0] - (sums[0] + sums[2])).abs() < 1e-15);
    }

    #[test]
    fn harden_breaks_ties_low() {
        let w = WeightMatrix::new(2, 3, vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45]).unwrap();
        let h = w.harden();
        assert_eq!(h.hard_labels(), vec![0, 1]);
        assert!(h.is_one_hot());
        assert!(!w.is_one_hot());
    }

    #[test]
    fn stochastic_error_reports_worst_row() {
        let w = WeightMatrix::new(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        assert_eq!(w.stochastic_error(), 0.0);
        let bad = WeightMatrix {
            rows: 2,
            states: 2,
            entries: vec![0.5, 0.5, 0.25, 0.7],
        };
        assert!((bad.stochastic_error() - 0.05).abs() < 1e-15);
        let negative = WeightMatrix {
            rows: 1,
            states: 2,
            entries: vec![1.5, -0.5],
        };
        assert_eq!(negative.stochastic_error(), f64::INFINITY);
    }
}
