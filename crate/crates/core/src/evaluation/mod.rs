//! Quality metrics over learned motion features: Frechet distance between
//! Gaussian fits, diversity, and multimodality, with bootstrap spreads.

pub mod extractor;

pub use extractor::{ExtractorConfig, FeatureExtractor, EMBED_DIM};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};
use crate::{CoreError, Result};

/// Shrinkage weight used when there are too few samples for a full
/// covariance estimate.
const SHRINKAGE: f64 = 0.1;

/// Gaussian fit of a feature set: mean vector and covariance matrix.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    shrunk: bool,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, shrunk: bool) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(CoreError::Evaluation(format!(
                "covariance is {}x{} for a {d}-dim mean",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).norm();
        if asym > 1e-9 {
            return Err(CoreError::Evaluation(format!("covariance asymmetry {asym:.3e}")));
        }
        if (0..d).any(|i| cov[(i, i)] < 0.0) {
            return Err(CoreError::Evaluation("negative covariance diagonal".into()));
        }
        Ok(Self { mean, cov, shrunk })
    }

    /// Fit from an `[n, d]` feature matrix. With n <= d the full covariance
    /// is singular, so a diagonal-plus-shrinkage estimate is used and
    /// flagged.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let n = features.rows();
        let d = features.cols();
        if features.shape().len() != 2 || n < 2 {
            return Err(CoreError::Evaluation(format!(
                "need an [n >= 2, d] feature matrix, got {:?}",
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(CoreError::Evaluation("non-finite feature values".into()));
        }
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += features.at(i, j) as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }

        let denom = (n - 1) as f64;
        let shrunk = n <= d;
        let cov = if shrunk {
            let mut var = vec![0.0f64; d];
            for i in 0..n {
                for (j, v) in var.iter_mut().enumerate() {
                    let c = features.at(i, j) as f64 - mean[j];
                    *v += c * c;
                }
            }
            let avg = var.iter().sum::<f64>() / (d as f64 * denom);
            DMatrix::from_fn(d, d, |r, c| {
                if r == c {
                    (1.0 - SHRINKAGE) * var[r] / denom + SHRINKAGE * avg
                } else {
                    0.0
                }
            })
        } else {
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..n {
                let centered: Vec<f64> =
                    (0..d).map(|j| features.at(i, j) as f64 - mean[j]).collect();
                for r in 0..d {
                    for c in r..d {
                        cov[(r, c)] += centered[r] * centered[c];
                    }
                }
            }
            for r in 0..d {
                for c in r..d {
                    cov[(r, c)] /= denom;
                    cov[(c, r)] = cov[(r, c)];
                }
            }
            cov
        };
        Self::new(mean, cov, shrunk)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// True when the covariance came from the diagonal-plus-shrinkage path.
    pub fn is_shrunk(&self) -> bool {
        self.shrunk
    }

    /// Stats with a diagonal covariance, mostly for synthetic oracles.
    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(CoreError::Evaluation(format!(
                "{} means for {} variances",
                mean.len(),
                variances.len()
            )));
        }
        let d = mean.len();
        let cov = DMatrix::from_fn(d, d, |r, c| if r == c { variances[r] } else { 0.0 });
        Self::new(mean, cov, false)
    }
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussian fits:
/// `|m1 - m2|^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2})`.
pub fn fid(real: &GaussianStats, generated: &GaussianStats) -> Result<Real> {
    if real.dim() != generated.dim() {
        return Err(CoreError::Evaluation(format!(
            "dimension mismatch {} vs {}",
            real.dim(),
            generated.dim()
        )));
    }
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(&generated.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1 = sqrtm(&real.cov);
    let inner = &s1 * &generated.cov * &s1;
    let cross = sqrtm(&inner);
    let trace = real.cov.trace() + generated.cov.trace() - 2.0 * cross.trace();
    let value = mean_term + trace;
    if !value.is_finite() {
        return Err(CoreError::Evaluation(format!("non-finite distance {value}")));
    }
    Ok(value as Real)
}

fn row_distance(features: &Tensor, i: usize, j: usize) -> Real {
    let d = features.cols();
    let mut acc = 0.0;
    for c in 0..d {
        let diff = features.at(i, c) - features.at(j, c);
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Mean Euclidean distance over `pair_count` random pairs of distinct
/// samples.
pub fn diversity(features: &Tensor, pair_count: usize, rng: &mut ChaCha8Rng) -> Result<Real> {
    let n = features.rows();
    if features.shape().len() != 2 || n < 2 {
        return Err(CoreError::Evaluation(format!(
            "diversity needs at least 2 samples, got {n}"
        )));
    }
    if pair_count == 0 {
        return Err(CoreError::Evaluation("pair_count must be positive".into()));
    }
    let mut acc = 0.0;
    for _ in 0..pair_count {
        let i = rng.gen_range(0..n);
        let j = {
            let k = rng.gen_range(0..n - 1);
            if k >= i {
                k + 1
            } else {
                k
            }
        };
        acc += row_distance(features, i, j);
    }
    Ok(acc / pair_count as Real)
}

/// Mean pairwise distance within groups of samples sharing one condition,
/// averaged over groups. Every group needs at least two samples.
pub fn multimodality(groups: &[Tensor]) -> Result<Real> {
    if groups.is_empty() {
        return Err(CoreError::Evaluation("multimodality needs at least one group".into()));
    }
    let mut acc = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        let n = g.rows();
        if g.shape().len() != 2 || n < 2 {
            return Err(CoreError::Evaluation(format!(
                "group {gi} has {n} samples, need at least 2"
            )));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                sum += row_distance(g, i, j);
                pairs += 1;
            }
        }
        acc += sum / pairs as Real;
    }
    Ok(acc / groups.len() as Real)
}

/// Resample-with-replacement evaluation of a metric: mean and standard
/// deviation over `repeats` bootstrap resamples.
pub fn bootstrap_metric(
    metric: &dyn Fn(&Tensor) -> Result<Real>,
    features: &Tensor,
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Real, Real)> {
    if repeats < 2 {
        return Err(CoreError::Evaluation(format!(
            "bootstrap needs at least 2 repeats, got {repeats}"
        )));
    }
    let n = features.rows();
    let d = features.cols();
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let pick = rng.gen_range(0..n);
            data.extend_from_slice(features.row(pick));
        }
        let resampled = Tensor::new(vec![n, d], data)?;
        values.push(metric(&resampled)?);
    }
    let mean = values.iter().sum::<Real>() / repeats as Real;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (repeats - 1) as Real;
    Ok((mean, var.sqrt()))
}

/// One metric with its bootstrap spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub mean: Real,
    pub std: Real,
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} +- {:.3}", self.mean, self.std)
    }
}

/// One row of the metrics report.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub fid: MetricValue,
    pub diversity: MetricValue,
    pub multimodality: Option<MetricValue>,
}

/// Plain-text report: dataset, method, FID, Diversity, Multimodality
/// columns with their spreads, plus any caveat notes.
pub fn format_report(rows: &[ReportRow], notes: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<16} {:<18} {:<18} {:<18}\n",
        "dataset", "method", "FID", "Diversity", "Multimodality"
    ));
    for r in rows {
        let mm = r.multimodality.map_or("-".to_string(), |m| m.to_string());
        out.push_str(&format!(
            "{:<14} {:<16} {:<18} {:<18} {:<18}\n",
            r.dataset,
            r.method,
            r.fid.to_string(),
            r.diversity.to_string(),
            mm
        ));
    }
    for n in notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}
