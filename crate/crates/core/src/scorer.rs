//! Mahalanobis outlier scoring against clusters of training representations,
//! threshold calibration, and the max-softmax baseline score.

use serde::{Deserialize, Serialize};

use crate::error::{LeoError, Result};
use crate::kmeans::kmeans;

/// Relative covariance shrinkage: `ε = SHRINK_SCALE · tr(Σ)/dim`.
pub const SHRINK_SCALE: f64 = 1e-3;
pub const SHRINK_FLOOR: f64 = 1e-6;
/// Times `ε` is multiplied by 10 when a factorization fails.
pub const MAX_SHRINK_RETRIES: usize = 3;
pub const DEFAULT_QUANTILE: f64 = 0.95;
/// Fewer validation scores than this triggers a warning.
pub const MIN_CALIBRATION_SCORES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoringMode {
    /// Mean of the gated statement vectors over real rows (`d` dims).
    #[default]
    Pooled,
    /// The flattened `L·d` vector with a diagonal covariance.
    ConcatDiagonal,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::Pooled => "pooled",
            ScoringMode::ConcatDiagonal => "concat-diagonal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pooled" | "pooled-d" => Some(ScoringMode::Pooled),
            "concat-diagonal" | "concat" => Some(ScoringMode::ConcatDiagonal),
            _ => None,
        }
    }
}

/// Scoring vector of an `L × d` statement matrix (row-major) with gates `z`.
/// Only the first `true_length` rows are real.
pub fn scoring_representation(matrix: &[f64], dim: usize, true_length: usize, z: &[f64], mode: ScoringMode) -> Vec<f64> {
    match mode {
        ScoringMode::Pooled => {
            let mut out = vec![0.0; dim];
            if true_length == 0 {
                return out;
            }
            for (i, &zi) in z.iter().enumerate().take(true_length) {
                for (o, &x) in out.iter_mut().zip(&matrix[i * dim..(i + 1) * dim]) {
                    *o += zi * x;
                }
            }
            let inv = 1.0 / true_length as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            out
        }
        ScoringMode::ConcatDiagonal => {
            let mut out = vec![0.0; matrix.len()];
            for (i, &zi) in z.iter().enumerate().take(true_length) {
                for j in 0..dim {
                    out[i * dim + j] = zi * matrix[i * dim + j];
                }
            }
            out
        }
    }
}

/// Inverse of the regularised covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Precision {
    /// Row-major `dim × dim`.
    Dense(Vec<f64>),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub mean: Vec<f64>,
    pub precision: Precision,
    pub count: usize,
    /// Shrinkage actually applied (after any retries).
    pub shrinkage: f64,
}

impl ClusterStat {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x − μ)ᵀ P (x − μ)`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let n = diff.len();
        match &self.precision {
            Precision::Diagonal(p) => diff.iter().zip(p).map(|(d, p)| d * d * p).sum(),
            Precision::Dense(p) => {
                let mut s = 0.0;
                for i in 0..n {
                    let row = &p[i * n..(i + 1) * n];
                    let t: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
                    s += diff[i] * t;
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatistics {
    pub clusters: Vec<ClusterStat>,
    pub mode: ScoringMode,
}

impl ClusterStatistics {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, ClusterStat::dim)
    }
}

/// Mean and unbiased covariance (row-major) of a set of points.
/// A single point has a zero covariance.
pub fn sample_statistics(points: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let dim = points.first().map_or(0, |p| p.len());
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    if n > 1 {
        for p in points {
            let d: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
            for i in 0..dim {
                for j in i..dim {
                    cov[i * dim + j] += d[i] * d[j];
                }
            }
        }
        let inv = 1.0 / (n - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] * inv;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
    }
    (mean, cov)
}

/// Lower-triangular `L` with `A = L·Lᵀ`, or `None` if `A` is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !d.is_finite() || d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Some(inv)
}

/// Default shrinkage for a covariance: `1e-3 · tr(Σ)/dim`, at least `1e-6`.
pub fn default_shrinkage(trace: f64, dim: usize) -> f64 {
    (SHRINK_SCALE * trace / dim.max(1) as f64).max(SHRINK_FLOOR)
}

/// Builds one cluster's statistics. `shrinkage = None` uses
/// [`default_shrinkage`]. Dense inversion retries with `ε × 10` up to three
/// times.
pub fn cluster_stat(points: &[&[f64]], mode: ScoringMode, shrinkage: Option<f64>) -> Result<ClusterStat> {
    if points.is_empty() {
        return Err(LeoError::Calibration("cluster has no members".into()));
    }
    let (mean, cov) = sample_statistics(points);
    let dim = mean.len();
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let mut eps = shrinkage.unwrap_or_else(|| default_shrinkage(trace, dim));
    let precision = match mode {
        ScoringMode::ConcatDiagonal => {
            if eps <= 0.0 && (0..dim).any(|i| cov[i * dim + i] <= 0.0) {
                eps = default_shrinkage(trace, dim);
            }
            Precision::Diagonal((0..dim).map(|i| 1.0 / (cov[i * dim + i] + eps)).collect())
        }
        ScoringMode::Pooled => {
            let mut attempt = 0;
            loop {
                let mut reg = cov.clone();
                for i in 0..dim {
                    reg[i * dim + i] += eps;
                }
                if let Some(inv) = spd_inverse(&reg, dim) {
                    break Precision::Dense(inv);
                }
                if attempt == MAX_SHRINK_RETRIES {
                    return Err(LeoError::Calibration(format!(
                        "covariance not positive definite after {MAX_SHRINK_RETRIES} shrinkage increases"
                    )));
                }
                attempt += 1;
                eps = if eps > 0.0 { eps * 10.0 } else { default_shrinkage(trace, dim) };
                log::warn!("covariance inversion failed; retrying with shrinkage {eps:e}");
            }
        }
    };
    Ok(ClusterStat {
        mean,
        precision,
        count: points.len(),
        shrinkage: eps,
    })
}

/// Clusters the training representations with k-means and fits per-cluster
/// statistics. `k` is reduced to the number of points when necessary.
pub fn fit_cluster_statistics(
    reps: &[Vec<f64>],
    k: usize,
    seed: u64,
    mode: ScoringMode,
    shrinkage: Option<f64>,
    max_iters: usize,
) -> Result<ClusterStatistics> {
    if reps.is_empty() {
        return Err(LeoError::Calibration("no training representations".into()));
    }
    if k == 0 {
        return Err(LeoError::config("number of clusters must be positive"));
    }
    if reps.len() < k {
        log::warn!("{} representations for {k} clusters; reducing K", reps.len());
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(LeoError::usage("representations differ in dimension"));
    }
    let km = kmeans(reps, k, max_iters, seed);
    let mut clusters = Vec::with_capacity(km.k());
    for c in 0..km.k() {
        let members: Vec<&[f64]> = reps
            .iter()
            .zip(&km.labels)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| r.as_slice())
            .collect();
        if members.is_empty() {
            continue;
        }
        clusters.push(cluster_stat(&members, mode, shrinkage)?);
    }
    Ok(ClusterStatistics { clusters, mode })
}

/// Minimum quadratic form over all clusters.
pub fn mahalanobis_score(x: &[f64], stats: &ClusterStatistics) -> Result<f64> {
    if stats.clusters.is_empty() {
        return Err(LeoError::usage("no cluster statistics"));
    }
    if x.len() != stats.dim() {
        return Err(LeoError::usage(format!(
            "representation has {} dims, statistics expect {}",
            x.len(),
            stats.dim()
        )));
    }
    Ok(stats
        .clusters
        .iter()
        .map(|c| c.quadratic_form(x))
        .fold(f64::INFINITY, f64::min))
}

/// The `⌈q·n⌉`-th smallest value (1-based), for `q ∈ (0, 1]`.
pub fn nearest_rank(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(LeoError::Calibration("no scores for the quantile".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(LeoError::usage(format!("quantile {q} outside (0, 1]")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    // Guard against q·n landing a hair above an integer.
    let rank = ((q * s.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(s[rank.min(s.len()) - 1])
}

/// Threshold at which `quantile` of the validation ID scores fall at or below.
pub fn calibrate_threshold(val_scores: &[f64], quantile: f64) -> Result<f64> {
    if val_scores.len() < MIN_CALIBRATION_SCORES && !val_scores.is_empty() {
        log::warn!("calibrating on only {} validation scores", val_scores.len());
    }
    if val_scores.iter().any(|s| !s.is_finite()) {
        return Err(LeoError::Calibration("non-finite validation score".into()));
    }
    nearest_rank(val_scores, quantile)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Id => "id",
            Decision::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDetector {
    pub stats: ClusterStatistics,
    pub threshold: f64,
    pub quantile: f64,
}

impl CalibratedDetector {
    pub fn new(stats: ClusterStatistics, threshold: f64, quantile: f64) -> Result<Self> {
        if !threshold.is_finite() || !(quantile > 0.0 && quantile < 1.0) {
            return Err(LeoError::Calibration(format!("invalid threshold {threshold} / quantile {quantile}")));
        }
        Ok(CalibratedDetector { stats, threshold, quantile })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        mahalanobis_score(x, &self.stats)
    }

    pub fn decide(&self, score: f64) -> Decision {
        decide(score, self.threshold)
    }
}

/// OOD iff the score is strictly above the threshold.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Ood
    } else {
        Decision::Id
    }
}

/// Max-softmax-probability baseline: `1 − max(probs)`.
pub fn msp_score(probs: &[f64]) -> f64 {
    1.0 - probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn single(mean: Vec<f64>, precision: Precision) -> ClusterStatistics {
        ClusterStatistics {
            clusters: vec![ClusterStat {
                mean,
                precision,
                count: 1,
                shrinkage: 0.0,
            }],
            mode: ScoringMode::Pooled,
        }
    }

    #[test]
    fn representation_examples() {
        let m = [1.0, 2.0, 0.0, 0.0];
        assert_eq!(scoring_representation(&m, 2, 1, &[1.0, 1.0], ScoringMode::Pooled), vec![1.0, 2.0]);
        assert_eq!(scoring_representation(&m, 2, 1, &[0.0, 0.0], ScoringMode::Pooled), vec![0.0, 0.0]);
        let m = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(scoring_representation(&m, 2, 2, &[1.0, 1.0], ScoringMode::Pooled), vec![0.5, 0.5]);
        assert_eq!(scoring_representation(&m, 2, 0, &[1.0, 1.0], ScoringMode::Pooled), vec![0.0, 0.0]);
        assert_eq!(
            scoring_representation(&m, 2, 2, &[0.5, 1.0], ScoringMode::ConcatDiagonal),
            vec![0.5, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn score_examples() {
        let s = single(vec![1.0, 1.0], Precision::Dense(vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(mahalanobis_score(&[1.0, 1.0], &s).unwrap(), 0.0);
        assert_eq!(mahalanobis_score(&[2.0, 3.0], &s).unwrap(), 5.0);
        assert!(mahalanobis_score(&[2.0], &s).is_err());
        // Σ = diag(2, 0.5), ε = 0
        let st = cluster_stat_from_cov(vec![0.0, 0.0], &[2.0, 0.0, 0.0, 0.5]);
        assert!((mahalanobis_score(&[1.0, 1.0], &st).unwrap() - 2.5).abs() < 1e-15);
    }

    fn cluster_stat_from_cov(mean: Vec<f64>, cov: &[f64]) -> ClusterStatistics {
        let n = mean.len();
        single(mean, Precision::Dense(spd_inverse(cov, n).unwrap()))
    }

    #[test]
    fn two_point_statistics() {
        let p = [1.0, 2.0];
        let q = [3.0, 6.0];
        let (mean, cov) = sample_statistics(&[&p, &q]);
        assert_eq!(mean, vec![2.0, 4.0]);
        // unbiased: Σ = (d dᵀ + d dᵀ)/1 with d = (±1, ±2)
        assert_eq!(cov, vec![2.0, 4.0, 4.0, 8.0]);
    }

    #[test]
    fn singleton_cluster_precision() {
        let p = [0.5, -0.5, 2.0];
        let c = cluster_stat(&[&p], ScoringMode::Pooled, None).unwrap();
        assert_eq!(c.shrinkage, SHRINK_FLOOR);
        let Precision::Dense(inv) = &c.precision else { panic!() };
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / SHRINK_FLOOR } else { 0.0 };
                assert!((inv[i * 3 + j] - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_sample_statistics_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n1 = Normal::new(1.0, 2.0).unwrap();
        let n2 = Normal::new(-3.0, 0.5).unwrap();
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a = n1.sample(&mut rng);
                vec![a, 0.3 * a + n2.sample(&mut rng)]
            })
            .collect();
        let stats = fit_cluster_statistics(&pts, 1, 0, ScoringMode::Pooled, None, 10).unwrap();
        // oracle: two-pass textbook formulas
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / 200.0;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / 200.0;
        let sxx = pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / 199.0;
        let syy = pts.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / 199.0;
        let sxy = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / 199.0;
        let c = &stats.clusters[0];
        assert!((c.mean[0] - mx).abs() < 1e-12 && (c.mean[1] - my).abs() < 1e-12);
        let eps = c.shrinkage;
        assert!((eps - 1e-3 * (sxx + syy) / 2.0).abs() < 1e-15);
        // closed-form 2×2 inverse of Σ + εI
        let (a, b, d) = (sxx + eps, sxy, syy + eps);
        let det = a * d - b * b;
        let Precision::Dense(inv) = &c.precision else { panic!() };
        let want = [d / det, -b / det, -b / det, a / det];
        for (x, y) in inv.iter().zip(want) {
            assert!((x - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn dense_quadratic_form_oracle() {
        // random SPD Σ = A Aᵀ + I; oracle solves Σ y = x − μ by Gaussian elimination
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stats = cluster_stat_from_cov(mean.clone(), &cov);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let y = gauss_solve(cov.clone(), d.clone(), n);
            let want: f64 = d.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((mahalanobis_score(&x, &stats).unwrap() - want).abs() < 1e-9);
        }
    }

    fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
            }
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r * n + c] / a[c * n + c];
                for k in c..n {
                    a[r * n + k] -= f * a[c * n + k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r * n + r];
        }
        x
    }

    #[test]
    fn singular_covariance_gets_shrinkage() {
        // collinear points: Σ is rank one
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let stats = fit_cluster_statistics(&pts, 1, 0, ScoringMode::Pooled, None, 10).unwrap();
        assert!(mahalanobis_score(&[1.0, -1.0], &stats).unwrap().is_finite());
    }

    #[test]
    fn zero_shrinkage_on_singular_retries() {
        let p = [1.0, 1.0];
        let c = cluster_stat(&[&p, &p], ScoringMode::Pooled, Some(0.0)).unwrap();
        assert!(c.shrinkage > 0.0);
    }

    #[test]
    fn fewer_points_than_k() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let stats = fit_cluster_statistics(&pts, 5, 0, ScoringMode::Pooled, None, 10).unwrap();
        assert_eq!(stats.k(), 2);
        assert_eq!(mahalanobis_score(&[1.0, 1.0], &stats).unwrap(), 0.0);
    }

    #[test]
    fn calibration_examples() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 19.0);
        assert_eq!(calibrate_threshold(&[3.0; 7], 0.95).unwrap(), 3.0);
        assert_eq!(calibrate_threshold(&[0.0], 0.95).unwrap(), 0.0);
        assert!(matches!(calibrate_threshold(&[], 0.95), Err(LeoError::Calibration(_))));
        // ⌈0.95·100⌉ = 95 exactly, despite 0.95·100 rounding to 95.00000000000001
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 95.0);
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(2.0, 2.0), Decision::Id);
        assert_eq!(decide(2.0 + 1e-12, 2.0), Decision::Ood);
        assert_eq!(decide(0.0, 1.0), Decision::Id);
    }

    #[test]
    fn msp_examples() {
        assert!((msp_score(&[0.9, 0.1]) - 0.1).abs() < 1e-15);
        assert_eq!(msp_score(&[0.5, 0.5]), 0.5);
        assert_eq!(msp_score(&[1.0, 0.0]), 0.0);
    }

    fn random_stats(rng: &mut ChaCha8Rng, k: usize) -> ClusterStatistics {
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        fit_cluster_statistics(&pts, k, rng.random(), ScoringMode::Pooled, None, 10).unwrap()
    }

    proptest! {
        #[test]
        fn permutation_and_superset(seed in 0u64..500, x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = random_stats(&mut rng, 3);
            let s = mahalanobis_score(&x, &stats).unwrap();
            let mut rev = stats.clone();
            rev.clusters.reverse();
            prop_assert_eq!(s, mahalanobis_score(&x, &rev).unwrap());
            let mut sup = stats.clone();
            sup.clusters.extend(random_stats(&mut rng, 2).clusters);
            prop_assert!(mahalanobis_score(&x, &sup).unwrap() <= s);
            prop_assert!(s >= 0.0);
        }

        #[test]
        fn zero_only_at_mean(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = random_stats(&mut rng, 2);
            let mu = stats.clusters[1].mean.clone();
            prop_assert_eq!(mahalanobis_score(&mu, &stats).unwrap(), 0.0);
            let off: Vec<f64> = mu.iter().map(|v| v + 1e-3).collect();
            prop_assert!(mahalanobis_score(&off, &stats).unwrap() > 0.0);
        }

        #[test]
        fn calibration_monotone(mut s in proptest::collection::vec(-10.0f64..10.0, 1..60), extra in 0.0f64..5.0) {
            let t = calibrate_threshold(&s, 0.95).unwrap();
            s.push(t + extra + 1e-9);
            prop_assert!(calibrate_threshold(&s, 0.95).unwrap() >= t);
        }
    }
}
