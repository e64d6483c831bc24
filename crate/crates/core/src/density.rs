//! Component densities: weighted Gaussian KDEs for the (scalar) future-cone
//! values, weighted multivariate Gaussians for past cones, and the L1
//! distance used to decide which states to merge.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel mass beyond this many bandwidths is below 1e-14 of the peak.
const KERNEL_CUTOFF: f64 = 8.0;
/// Grid spacing of the binned evaluator, in bandwidths.
const BIN_WIDTH: f64 = 1.0 / 40.0;
/// Coarsest spacing still accepted before falling back to exact sums.
const MAX_BIN_WIDTH: f64 = 1.0 / 20.0;
const MAX_BINS: usize = 1 << 18;
/// Sample-query products at or below this are always summed exactly.
const EXACT_WORK_LIMIT: usize = 1 << 22;

/// Number of points on the shared grid used for L1 distances.
pub const L1_GRID_POINTS: usize = 512;
/// Padding of the L1 grid beyond the pooled sample range, in max bandwidths.
pub const L1_GRID_PAD: f64 = 3.0;

#[inline]
pub fn gaussian_kernel(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// `ln(sum(exp(x)))`, or `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Replaces log weights with `exp(x - logsumexp(x))` in place. Returns false,
/// leaving `xs` untouched, when no term is finite.
pub fn softmax_in_place(xs: &mut [f64]) -> bool {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
    true
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolation quantile (type 7) of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule of thumb, `0.9 * min(sd, IQR/1.34) * n^(-1/5)`.
///
/// Falls back to the standard deviation when the IQR vanishes. Fewer than
/// two points, or no spread at all, is an error; callers substitute
/// [`fallback_bandwidth`].
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::domain("bandwidth needs at least two points"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = sample_sd(values);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut scale = sd.min(iqr / 1.34);
    if scale <= 0.0 {
        scale = sd;
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain("bandwidth sample has zero spread"));
    }
    Ok(0.9 * scale * (values.len() as f64).powf(-0.2))
}

/// `1.06 * scale * N^(-1/5)` over the pooled values; the scale is the sample
/// standard deviation, else `|mean|`, else 1.
pub fn fallback_bandwidth(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let sd = if values.len() >= 2 { sample_sd(values) } else { 0.0 };
    let scale = if sd > 0.0 {
        sd
    } else {
        let mean = values.iter().sum::<f64>() / n;
        if mean != 0.0 && mean.is_finite() {
            mean.abs()
        } else {
            1.0
        }
    };
    1.06 * scale * n.powf(-0.2)
}

/// Scalar values with non-negative weights.
#[derive(Debug, Clone)]
pub struct WeightedSample1D {
    values: Arc<[f64]>,
    weights: Vec<f64>,
    total: f64,
}

impl WeightedSample1D {
    pub fn new(values: Arc<[f64]>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::domain(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("sample values must be finite"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::domain("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("weights sum to zero"));
        }
        Ok(WeightedSample1D {
            values,
            weights,
            total,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shared_values(&self) -> &Arc<[f64]> {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weighted Gaussian KDE: `f(x) = sum_r w_r K_h(x_r - x) / sum_r w_r`.
#[derive(Debug, Clone)]
pub struct KdeComponent {
    sample: WeightedSample1D,
    bandwidth: f64,
}

impl KdeComponent {
    pub fn new(sample: WeightedSample1D, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::domain(format!("bandwidth {bandwidth} must be positive")));
        }
        Ok(KdeComponent { sample, bandwidth })
    }

    pub fn sample(&self) -> &WeightedSample1D {
        &self.sample
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Total weight N̂; the soft count of points in the state.
    pub fn effective_size(&self) -> f64 {
        self.sample.total
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self
            .sample
            .values
            .iter()
            .zip(&self.sample.weights)
            .map(|(&v, &w)| w * gaussian_kernel((v - x) / h))
            .sum();
        s / (h * self.sample.total)
    }

    /// Density at many points. Large problems go through a linearly binned
    /// convolution (relative error around 1e-4); everything else, and any
    /// query off the binning grid, is summed exactly.
    pub fn pdf_many(&self, queries: &[f64]) -> Vec<f64> {
        if self.sample.len() * queries.len() <= EXACT_WORK_LIMIT {
            return queries.iter().map(|&q| self.pdf(q)).collect();
        }
        match BinnedDensity::build(self) {
            Some(binned) => queries
                .iter()
                .map(|&q| binned.eval(q).unwrap_or_else(|| self.pdf(q)))
                .collect(),
            None => queries.iter().map(|&q| self.pdf(q)).collect(),
        }
    }

    /// Mean of the KDE, which for a symmetric kernel is the weighted sample mean.
    pub fn mean(&self) -> f64 {
        self.sample
            .values
            .iter()
            .zip(&self.sample.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / self.sample.total
    }

    /// Variance of the KDE: weighted sample variance plus `h^2`.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let v = self
            .sample
            .values
            .iter()
            .zip(&self.sample.weights)
            .map(|(x, w)| w * (x - m).powi(2))
            .sum::<f64>()
            / self.sample.total;
        v + self.bandwidth.powi(2)
    }

    /// Kernel-smoothed bootstrap sampler over this component.
    pub fn sampler(&self) -> KdeSampler<'_> {
        KdeSampler {
            component: self,
            index: WeightedIndex::new(&self.sample.weights)
                .expect("weights validated at construction"),
        }
    }
}

/// Draws from a [`KdeComponent`]: a training value chosen with probability
/// proportional to its weight, plus `N(0, h^2)` noise.
pub struct KdeSampler<'a> {
    component: &'a KdeComponent,
    index: WeightedIndex<f64>,
}

impl KdeSampler<'_> {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = self.index.sample(rng);
        let z: f64 = rng.sample(StandardNormal);
        self.component.sample.values[i] + self.component.bandwidth * z
    }
}

/// A KDE pre-convolved on a fine grid, read back by linear interpolation.
struct BinnedDensity {
    lo: f64,
    dx: f64,
    density: Vec<f64>,
}

impl BinnedDensity {
    fn build(kde: &KdeComponent) -> Option<Self> {
        let h = kde.bandwidth;
        let values = kde.sample.values();
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let lo = min - KERNEL_CUTOFF * h;
        let hi = max + KERNEL_CUTOFF * h;
        let mut dx = h * BIN_WIDTH;
        if (hi - lo) / dx > MAX_BINS as f64 {
            dx = (hi - lo) / MAX_BINS as f64;
            if dx > h * MAX_BIN_WIDTH {
                return None;
            }
        }
        let bins = ((hi - lo) / dx).ceil() as usize + 2;

        let mut mass = vec![0.0; bins];
        for (&v, &w) in values.iter().zip(kde.sample.weights()) {
            if w == 0.0 {
                continue;
            }
            let pos = (v - lo) / dx;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            mass[k] += w * (1.0 - frac);
            mass[k + 1] += w * frac;
        }

        let reach = (KERNEL_CUTOFF * h / dx).ceil() as usize;
        let norm = 1.0 / (h * kde.sample.total);
        // kernel[reach + m] is the weight at offset m, for m in -reach..=reach
        let kernel: Vec<f64> = (0..=2 * reach)
            .map(|m| norm * gaussian_kernel((m as f64 - reach as f64) * dx / h))
            .collect();
        let mut density = vec![0.0; bins];
        for (b, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let start = b.saturating_sub(reach);
            let end = (b + reach).min(bins - 1);
            let k0 = start + reach - b;
            for (d, k) in density[start..=end].iter_mut().zip(&kernel[k0..]) {
                *d += m * k;
            }
        }
        Some(BinnedDensity { lo, dx, density })
    }

    fn eval(&self, x: f64) -> Option<f64> {
        let pos = (x - self.lo) / self.dx;
        if !(pos >= 0.0) || pos >= (self.density.len() - 1) as f64 {
            return None;
        }
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        Some(self.density[k] * (1.0 - frac) + self.density[k + 1] * frac)
    }
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Inverse Cholesky factor, column-major.
    whitener: Vec<f64>,
    /// `whitener * mean`.
    whitened_mean: Vec<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// Builds a component from explicit moments. The covariance must be
    /// symmetric positive definite.
    pub fn from_moments(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::domain("covariance shape does not match mean"));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::domain("covariance is not positive definite"))?;
        let chol_lower = chol.l();
        let log_det: f64 = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inverse = chol_lower
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::domain("covariance factor is singular"))?;
        let whitened_mean = (&inverse * &mean).iter().copied().collect();
        let whitener = inverse.as_slice().to_vec();
        Ok(GaussianComponent {
            mean,
            covariance,
            whitener,
            whitened_mean,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    /// Weighted mean and covariance (normalized by the weight sum) of
    /// row-major `rows`, plus a ridge of `1e-6 * trace / D` (at least 1e-12).
    pub fn fit(rows: &[f64], dim: usize, weights: &[f64]) -> Result<Self> {
        if dim == 0 || rows.len() != dim * weights.len() {
            return Err(Error::domain("row matrix does not match weights"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::domain("weights sum to zero"));
        }
        let mut mean = DVector::zeros(dim);
        for (row, &w) in rows.chunks_exact(dim).zip(weights) {
            if w != 0.0 {
                for (m, &x) in mean.iter_mut().zip(row) {
                    *m += w * x;
                }
            }
        }
        mean /= total;

        let acc = match dim {
            3 => scatter_fixed::<3>(rows, weights, mean.as_slice()),
            8 => scatter_fixed::<8>(rows, weights, mean.as_slice()),
            15 => scatter_fixed::<15>(rows, weights, mean.as_slice()),
            _ => scatter(rows, dim, weights, mean.as_slice()),
        };
        let mut cov = DMatrix::from_vec(dim, dim, acc);
        // symmetrize exactly
        for a in 0..dim {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov /= total;
        regularize(&mut cov);
        Self::from_moments(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let d = self.dim();
        let mut buf = [0.0f64; 64];
        let mut heap;
        let z: &mut [f64] = if d <= 64 {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        // z = L^{-1} x - L^{-1} mu, accumulated column by column
        for (zi, m) in z.iter_mut().zip(&self.whitened_mean) {
            *zi = -m;
        }
        for (col, &xb) in self.whitener.chunks_exact(d).zip(x) {
            for (zi, &w) in z.iter_mut().zip(col) {
                *zi += w * xb;
            }
        }
        self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    /// `logpdf` of each row of row-major `rows` into `out`.
    pub fn logpdf_rows(&self, rows: &[f64], out: &mut [f64]) {
        match self.dim() {
            3 => self.logpdf_rows_fixed::<3>(rows, out),
            8 => self.logpdf_rows_fixed::<8>(rows, out),
            15 => self.logpdf_rows_fixed::<15>(rows, out),
            d => {
                for (o, row) in out.iter_mut().zip(rows.chunks_exact(d)) {
                    *o = self.logpdf(row);
                }
            }
        }
    }

    /// `logpdf_rows` with the dimension known at compile time.
    fn logpdf_rows_fixed<const D: usize>(&self, rows: &[f64], out: &mut [f64]) {
        let mut w = [[0.0; D]; D];
        for (b, col) in self.whitener.chunks_exact(D).enumerate() {
            w[b].copy_from_slice(col);
        }
        let mut m = [0.0; D];
        m.copy_from_slice(&self.whitened_mean);
        for (o, row) in out.iter_mut().zip(rows.chunks_exact(D)) {
            let mut z = m.map(|v| -v);
            for b in 0..D {
                for a in 0..D {
                    z[a] += w[b][a] * row[b];
                }
            }
            *o = self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        }
    }

    pub fn try_logpdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!(
                "point has dimension {}, component {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.logpdf(x))
    }
}

/// `sum_i w_i (x_i - m)(x_i - m)^T`, column-major.
fn scatter(rows: &[f64], dim: usize, weights: &[f64], mean: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for (row, &w) in rows.chunks_exact(dim).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (c, (&x, &m)) in centered.iter_mut().zip(row.iter().zip(mean)) {
            *c = x - m;
        }
        for (col, &ca) in acc.chunks_exact_mut(dim).zip(&centered) {
            let wa = w * ca;
            for (p, &cb) in col.iter_mut().zip(&centered) {
                *p += wa * cb;
            }
        }
    }
    acc
}

/// [`scatter`] with the dimension known at compile time.
fn scatter_fixed<const D: usize>(rows: &[f64], weights: &[f64], mean: &[f64]) -> Vec<f64> {
    let mut acc = [[0.0; D]; D];
    let mut m = [0.0; D];
    m.copy_from_slice(mean);
    for (row, &w) in rows.chunks_exact(D).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut c = [0.0; D];
        for a in 0..D {
            c[a] = row[a] - m[a];
        }
        for a in 0..D {
            let wa = w * c[a];
            for b in 0..D {
                acc[a][b] += wa * c[b];
            }
        }
    }
    acc.iter().flatten().copied().collect()
}

/// Adds the ridge, escalating it if the matrix still fails to factor.
fn regularize(cov: &mut DMatrix<f64>) {
    let d = cov.nrows();
    let mut ridge = (1e-6 * cov.trace() / d as f64).max(1e-12);
    if !ridge.is_finite() {
        ridge = 1e-12;
    }
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let mut extra = ridge;
    while cov.clone().cholesky().is_none() && extra.is_finite() {
        extra *= 10.0;
        for i in 0..d {
            cov[(i, i)] += extra;
        }
    }
}

/// Uniform evaluation grid shared by every component in a distance computation.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    points: Vec<f64>,
}

impl EvalGrid {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo < hi) || n < 2 {
            return Err(Error::domain("grid needs lo < hi and at least two points"));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Ok(EvalGrid {
            points: (0..n).map(|i| lo + step * i as f64).collect(),
        })
    }

    /// 512 points over the pooled sample range padded by three times the
    /// largest bandwidth.
    pub fn spanning(components: &[&KdeComponent]) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut h_max: f64 = 0.0;
        for c in components {
            for &v in c.sample.values() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            h_max = h_max.max(c.bandwidth);
        }
        if components.is_empty() {
            return Err(Error::domain("no components to span"));
        }
        Self::uniform(lo - L1_GRID_PAD * h_max, hi + L1_GRID_PAD * h_max, L1_GRID_POINTS)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Trapezoidal integral of values sampled on the grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.points
            .windows(2)
            .zip(values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

/// Trapezoidal approximation of `∫|f_a - f_b|` on a shared grid.
pub fn l1_distance(a: &KdeComponent, b: &KdeComponent, grid: &EvalGrid) -> f64 {
    l1_from_densities(&a.pdf_many(grid.points()), &b.pdf_many(grid.points()), grid)
}

/// L1 distance between two densities already evaluated on `grid`.
pub fn l1_from_densities(fa: &[f64], fb: &[f64], grid: &EvalGrid) -> f64 {
    let diff: Vec<f64> = fa.iter().zip(fb).map(|(a, b)| (a - b).abs()).collect();
    grid.integrate(&diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn kde(values: &[f64], weights: &[f64], h: f64) -> KdeComponent {
        let sample = WeightedSample1D::new(values.into(), weights.to_vec()).unwrap();
        KdeComponent::new(sample, h).unwrap()
    }

    fn normal_draws(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn silverman_on_normal_draws() {
        let x = normal_draws(1000, 1);
        let h = silverman_bandwidth(&x).unwrap();
        // 0.9 * 1000^(-1/5) = 0.22653; sample sd/IQR wobble a few percent
        assert!((h - 0.2265).abs() < 0.02, "h = {h}");
    }

    #[test]
    fn silverman_two_points() {
        // sd = sqrt(2), IQR = 1 (type-7 quantiles -0.5, 0.5)
        let expected = 0.9 * (2f64.sqrt()).min(1.0 / 1.34) * 2f64.powf(-0.2);
        assert_relative_eq!(silverman_bandwidth(&[-1.0, 1.0]).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn silverman_degenerate_inputs() {
        assert!(silverman_bandwidth(&[0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(silverman_bandwidth(&[3.0]).is_err());
        // zero IQR but positive sd uses the sd
        let h = silverman_bandwidth(&[0.0, 0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(h > 0.0);
        assert!(fallback_bandwidth(&[0.0, 0.0]) > 0.0);
        assert_relative_eq!(
            fallback_bandwidth(&[-1.0, 1.0]),
            1.06 * 2f64.sqrt() * 2f64.powf(-0.2),
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_kernel_peak() {
        assert_relative_eq!(kde(&[0.0], &[1.0], 1.0).pdf(0.0), 0.398_942_280_401_432_7, epsilon = 1e-15);
    }

    #[test]
    fn two_point_weighted_value() {
        let k = kde(&[-1.0, 1.0], &[1.0, 3.0], 1.0);
        let brute = (1.0 * (-0.5f64).exp() + 3.0 * (-0.5f64).exp()) / (2.0 * PI).sqrt() / 4.0;
        assert_relative_eq!(k.pdf(0.0), brute, epsilon = 1e-15);
        let k2 = kde(&[-1.0, 1.0], &[1.0, 3.0], 0.5);
        let x = 0.3;
        let brute2 = (1.0 * gaussian_kernel((x + 1.0) / 0.5) + 3.0 * gaussian_kernel((x - 1.0) / 0.5))
            / 0.5
            / 4.0;
        assert_relative_eq!(k2.pdf(x), brute2, epsilon = 1e-15);
    }

    #[test]
    fn uniform_weights_reduce_to_plain_kde() {
        let x = normal_draws(50, 2);
        let h = 0.4;
        let k = kde(&x, &vec![2.5; 50], h);
        for q in [-2.0, -0.3, 0.0, 1.7] {
            let plain: f64 = x.iter().map(|v| gaussian_kernel((v - q) / h)).sum::<f64>() / (50.0 * h);
            assert_relative_eq!(k.pdf(q), plain, max_relative = 1e-13);
        }
    }

    #[test]
    fn wkde_mean_examples() {
        assert_eq!(kde(&[2.0], &[1.0], 1.0).mean(), 2.0);
        assert_eq!(kde(&[0.0, 4.0], &[1.0, 1.0], 1.0).mean(), 2.0);
        assert_eq!(kde(&[0.0, 4.0], &[3.0, 1.0], 1.0).mean(), 1.0);
    }

    #[test]
    fn binned_matches_exact() {
        let mut x = normal_draws(4000, 3);
        x.extend(normal_draws(2000, 4).iter().map(|v| v * 0.5 + 3.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..x.len()).map(|_| rng.random::<f64>()).collect();
        let k = kde(&x, &w, silverman_bandwidth(&x).unwrap());
        let approx = k.pdf_many(&x);
        for (i, &q) in x.iter().enumerate().step_by(37) {
            let exact = k.pdf(q);
            assert!(
                ((approx[i] - exact) / exact).abs() < 1e-3,
                "x={q}: binned {} exact {exact}",
                approx[i]
            );
        }
        // queries off the binning grid fall back to exact sums
        let far = k.pdf_many(&[100.0; 2000]);
        assert_eq!(far[0], k.pdf(100.0));
    }

    #[test]
    fn fit_gaussian_symmetric_pair() {
        let g = GaussianComponent::fit(&[0.0, 0.0, 2.0, 2.0], 2, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(g.mean()[0], 1.0);
        assert_relative_eq!(g.mean()[1], 1.0);
    }

    #[test]
    fn fit_gaussian_dominant_weight() {
        let rows = [1.0, 2.0, 5.0, -3.0, 0.0, 7.0];
        let g = GaussianComponent::fit(&rows, 2, &[1.0, 1e-14, 1e-14]).unwrap();
        assert!((g.mean()[0] - 1.0).abs() < 1e-12);
        assert!((g.mean()[1] - 2.0).abs() < 1e-12);
        assert!(g.covariance().amax() < 1e-10);
        assert!(g.logpdf(&[1.0, 2.0]).is_finite());
    }

    #[test]
    fn fit_gaussian_rejects_zero_weights() {
        assert!(GaussianComponent::fit(&[0.0, 1.0], 1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn fit_gaussian_uniform_weights_match_sample_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (50, 3);
        let rows: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let g = GaussianComponent::fit(&rows, d, &vec![1.0; n]).unwrap();
        let mean: Vec<f64> = (0..d)
            .map(|a| (0..n).map(|i| rows[i * d + a]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..d {
            assert_relative_eq!(g.mean()[a], mean[a], max_relative = 1e-10);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (rows[i * d + a] - mean[a]) * (rows[i * d + b] - mean[b]) / n as f64;
                }
            }
        }
        let ridge = 1e-6 * cov.trace() / d as f64;
        for a in 0..d {
            for b in 0..d {
                let expect = cov[(a, b)] + if a == b { ridge } else { 0.0 };
                assert_relative_eq!(g.covariance()[(a, b)], expect, max_relative = 1e-10);
            }
        }
        // ridge itself is tiny relative to the moments
        assert!(ridge / cov.trace() < 1e-6);
    }

    #[test]
    fn logpdf_closed_forms() {
        let std2 = GaussianComponent::from_moments(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(std2.logpdf(&[0.0, 0.0]), -(2.0 * PI).ln(), epsilon = 1e-14);
        assert_relative_eq!(std2.logpdf(&[1.0, 0.0]), -(2.0 * PI).ln() - 0.5, epsilon = 1e-14);
        let scaled =
            GaussianComponent::from_moments(DVector::zeros(1), DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_relative_eq!(scaled.logpdf(&[0.0]), -0.5 * (2.0 * PI * 4.0).ln(), epsilon = 1e-14);
        assert!(std2.try_logpdf(&[0.0]).is_err());
    }

    #[test]
    fn logpdf_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianComponent::from_moments(DVector::zeros(2), m).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = kde(&[0.0], &[1.0], 1.0);
        let grid = EvalGrid::spanning(&[&a, &a]).unwrap();
        assert_eq!(l1_distance(&a, &a, &grid), 0.0);

        let left = kde(&[-100.0], &[1.0], 1.0);
        let right = kde(&[100.0], &[1.0], 1.0);
        let grid = EvalGrid::spanning(&[&left, &right]).unwrap();
        // a 512-point grid over [-103, 103] barely resolves unit kernels
        assert!((l1_distance(&left, &right, &grid) - 2.0).abs() < 0.05);
    }

    /// Trapezoid rule on 100k points over the same span as `grid`, with
    /// densities summed term by term.
    fn fine_l1(a: &KdeComponent, b: &KdeComponent, grid: &EvalGrid) -> f64 {
        let naive = |k: &KdeComponent, x: f64| {
            let h = k.bandwidth();
            let s = k.sample();
            s.values()
                .iter()
                .zip(s.weights())
                .map(|(v, w)| w * (-(x - v).powi(2) / (2.0 * h * h)).exp())
                .sum::<f64>()
                / (s.total_weight() * h * (2.0 * PI).sqrt())
        };
        let (lo, hi) = (grid.points()[0], *grid.points().last().unwrap());
        let n = 100_000;
        let dx = (hi - lo) / (n - 1) as f64;
        (0..n)
            .map(|i| {
                let x = lo + dx * i as f64;
                let f = (naive(a, x) - naive(b, x)).abs();
                if i == 0 || i == n - 1 {
                    0.5 * f
                } else {
                    f
                }
            })
            .sum::<f64>()
            * dx
    }

    #[test]
    fn l1_unit_shift_matches_fine_quadrature() {
        let a = kde(&[0.0], &[1.0], 1.0);
        let b = kde(&[1.0], &[1.0], 1.0);
        let grid = EvalGrid::spanning(&[&a, &b]).unwrap();
        let d = l1_distance(&a, &b, &grid);
        assert!((d - fine_l1(&a, &b, &grid)).abs() < 1e-3);
        // over the whole line the distance is 2(2 Phi(1/2) - 1) = 0.76584; the
        // padded span drops about 0.0026 of it
        assert!((d - 0.76584).abs() < 4e-3, "{d}");
    }

    #[test]
    fn sampler_moments_match_component() {
        let k = kde(&[-1.0, 0.5, 2.0, 4.0], &[0.1, 0.4, 0.3, 0.2], 0.7);
        let sampler = k.sampler();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| sampler.draw(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = k.variance().sqrt();
        assert!((mean - k.mean()).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
        let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let var_se = ((m4 - var * var) / n as f64).sqrt();
        assert!((var - k.variance()).abs() < 3.0 * var_se, "variance {var} vs {}", k.variance());
    }

    fn random_component(seed: u64) -> KdeComponent {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..30);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        kde(&x, &w, 0.2 + rng.random::<f64>())
    }

    proptest! {
        #[test]
        fn wkde_integrates_to_one(seed in 0u64..10_000) {
            let k = random_component(seed);
            let grid = EvalGrid::spanning(&[&k]).unwrap();
            // the 3-bandwidth pad leaves ~0.27% of tail mass off-grid; pad wider
            let (lo, hi) = (grid.points()[0], *grid.points().last().unwrap());
            let wide = EvalGrid::uniform(lo - 3.0 * k.bandwidth(), hi + 3.0 * k.bandwidth(), 4096).unwrap();
            let mass = wide.integrate(&k.pdf_many(wide.points()));
            prop_assert!((mass - 1.0).abs() <= 1e-3, "mass {}", mass);
        }

        #[test]
        fn wkde_weight_scale_invariant(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
            let k = random_component(seed);
            let scaled_weights: Vec<f64> = k.sample().weights().iter().map(|w| w * scale).collect();
            let s = WeightedSample1D::new(k.sample().shared_values().clone(), scaled_weights).unwrap();
            let k2 = KdeComponent::new(s, k.bandwidth()).unwrap();
            for q in [-3.0, 0.0, 2.5] {
                let (a, b) = (k.pdf(q), k2.pdf(q));
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
            }
        }

        #[test]
        fn l1_symmetric_and_triangle(s1 in 0u64..5000, s2 in 5000u64..10_000, s3 in 10_000u64..15_000) {
            let (a, b, c) = (random_component(s1), random_component(s2), random_component(s3));
            let grid = EvalGrid::spanning(&[&a, &b, &c]).unwrap();
            let ab = l1_distance(&a, &b, &grid);
            let ba = l1_distance(&b, &a, &grid);
            let ac = l1_distance(&a, &c, &grid);
            let cb = l1_distance(&c, &b, &grid);
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn l1_matches_fine_quadrature(s1 in 0u64..5000, s2 in 5000u64..10_000) {
            let (a, b) = (random_component(s1), random_component(s2));
            let grid = EvalGrid::spanning(&[&a, &b]).unwrap();
            let d = l1_distance(&a, &b, &grid);
            let oracle = fine_l1(&a, &b, &grid);
            prop_assert!((d - oracle).abs() < 1e-3, "{} vs {}", d, oracle);
        }

        #[test]
        fn logpdf_matches_dense_solve(seed in 0u64..10_000, d in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let mean = DVector::from_fn(d, |_, _| rng.random::<f64>());
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 3.0).collect();
            let g = GaussianComponent::from_moments(mean.clone(), cov.clone()).unwrap();
            let diff = DVector::from_column_slice(&x) - &mean;
            let solved = cov.clone().lu().solve(&diff).unwrap();
            let naive = -0.5 * (d as f64 * (2.0 * PI).ln() + cov.determinant().ln() + diff.dot(&solved));
            prop_assert!((g.logpdf(&x) - naive).abs() <= 1e-8);
        }
    }
}
