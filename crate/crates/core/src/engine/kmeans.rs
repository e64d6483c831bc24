//! Initial hard state assignments.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::stfield::LightConeSet;
use crate::{Error, Result};

use super::WeightMatrix;

const LLOYD_ROUNDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// k-means++ seeding refined by Lloyd iterations on the past cones.
    KMeansPP,
    /// Each row drawn uniformly from the states.
    Random,
}

/// One-hot initial weights over `k_max` states.
pub fn init_weights<R: Rng + ?Sized>(
    cones: &LightConeSet,
    k_max: usize,
    mode: InitMode,
    rng: &mut R,
) -> Result<WeightMatrix> {
    if cones.is_empty() {
        return Err(Error::domain("cannot initialize states for an empty cone set"));
    }
    if k_max == 0 || k_max > cones.len() {
        return Err(Error::domain(format!(
            "k_max = {k_max} must be in 1..={}",
            cones.len()
        )));
    }
    let labels = match mode {
        InitMode::Random => (0..cones.len()).map(|_| rng.random_range(0..k_max)).collect(),
        InitMode::KMeansPP => kmeans(cones.plc(), cones.plc_dim(), k_max, rng),
    };
    WeightMatrix::one_hot(&labels, k_max)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best })
}

/// k-means++ seeding (D^2 sampling) followed by Lloyd's algorithm.
fn kmeans<R: Rng + ?Sized>(data: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut centroids: Vec<Vec<f64>> = vec![point(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point already sits on a centroid
            Err(_) => rng.random_range(0..n),
        };
        let c = point(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.push(c);
    }

    let mut labels: Vec<usize> = (0..n).map(|i| nearest(point(i), &centroids).0).collect();
    for _ in 0..LLOYD_ROUNDS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            // empty clusters keep their previous centroid
            if counts[j] > 0 {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(point(i), &centroids).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}
