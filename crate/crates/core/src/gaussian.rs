//! Gaussian task embeddings and closed-form distances between them.
//!
//! Sample covariances are shrunk by [`SHRINKAGE`]·I at estimation time so the
//! distances always receive strictly positive-definite matrices, even when a
//! task subset holds fewer samples than the embedding has dimensions.

use numkit::linalg::{cholesky_log_det, cholesky_solve};
use numkit::{sym_eig, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Ridge added to every estimated covariance.
pub const SHRINKAGE: f64 = 1e-6;
/// Largest asymmetry accepted in a stored covariance.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues down to this are treated as rounding noise and clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-9;
/// Below this, a matrix is rejected as not PSD.
pub const PSD_REJECT_TOL: f64 = 1e-6;
/// Distances this far below zero are clamped; further is an error.
pub const NEGATIVE_DISTANCE_TOL: f64 = 1e-8;

/// A task's embedding distribution 𝒩(mean, cov).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    mean: Vec<f64>,
    cov: Vec<f64>,
    sample_count: usize,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, cov: Matrix, sample_count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.rows() != d || cov.cols() != d {
            return Err(FedError::Dimension(format!(
                "mean has {d} entries but covariance is {}x{}",
                cov.rows(),
                cov.cols()
            )));
        }
        if sample_count == 0 {
            return Err(FedError::Invalid("sample_count must be at least 1".into()));
        }
        if mean.iter().chain(cov.data()).any(|v| !v.is_finite()) {
            return Err(FedError::Num(numkit::NumError::NonFinite(
                "Gaussian parameters are not finite".into(),
            )));
        }
        let asym = cov.sub(&cov.transpose())?.max_abs();
        if asym > SYMMETRY_TOL {
            return Err(FedError::Invalid(format!(
                "covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let min_eig = sym_eig(&cov)?.values.first().copied().unwrap_or(0.0);
        if min_eig < -PSD_CLAMP_TOL {
            return Err(FedError::NotPsd(min_eig));
        }
        Ok(GaussianEmbedding {
            mean,
            cov: cov.data().to_vec(),
            sample_count,
        })
    }

    /// Diagonal-covariance convenience constructor.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        Self::new(mean, Matrix::from_diag(variances), 1)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_vec(d, d, self.cov.clone()).expect("covariance shape checked at construction")
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Sample mean and unbiased covariance (divisor n−1) plus `SHRINKAGE`·I.
pub fn estimate_gaussian(embeddings: &[Vec<f64>]) -> Result<GaussianEmbedding> {
    let n = embeddings.len();
    if n < 2 {
        return Err(FedError::Estimation(format!(
            "need at least 2 embeddings to estimate a covariance, got {n}"
        )));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(FedError::Dimension(format!(
            "embedding of length {} among length-{d} embeddings",
            bad.len()
        )));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    for e in embeddings {
        let c: Vec<f64> = e.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += SHRINKAGE;
    }
    GaussianEmbedding::new(mean, cov, n)
}

/// Principal square root `V diag(√λ) Vᵀ` of a symmetric PSD matrix.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    if let Some(&min) = eig.values.first() {
        if min < -PSD_REJECT_TOL {
            return Err(FedError::NotPsd(min));
        }
    }
    Ok(eig.rebuild(|l| l.max(0.0).sqrt()))
}

fn check_dims(p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(FedError::Dimension(format!(
            "Gaussians of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

fn clamp_distance(v: f64, what: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(FedError::Num(numkit::NumError::NonFinite(format!(
            "{what} is not finite"
        ))));
    }
    if v < -NEGATIVE_DISTANCE_TOL {
        return Err(FedError::Num(numkit::NumError::NonFinite(format!(
            "{what} is negative ({v:e})"
        ))));
    }
    Ok(v.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trace term tr(Σp + Σq − 2(Σp^½ Σq Σp^½)^½) of the Bures–Wasserstein distance.
pub fn bures_trace_term(sp: &Matrix, sq: &Matrix) -> Result<f64> {
    let root_p = psd_sqrt(sp)?;
    let inner = root_p.matmul(sq)?.matmul(&root_p)?;
    let cross = psd_sqrt(&inner)?;
    Ok(sp.trace() + sq.trace() - 2.0 * cross.trace())
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_squared(p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<f64> {
    check_dims(p, q)?;
    let v = sq_dist(p.mean(), q.mean()) + bures_trace_term(&p.cov(), &q.cov())?;
    clamp_distance(v, "squared 2-Wasserstein distance")
}

fn factor(m: &Matrix, which: &str) -> Result<Matrix> {
    m.cholesky().map_err(|e| {
        FedError::Num(numkit::NumError::NonFinite(format!(
            "{which} covariance is singular: {e}"
        )))
    })
}

/// tr(B⁻¹ A) via column solves against the Cholesky factor of B.
fn trace_solve(lb: &Matrix, a: &Matrix) -> f64 {
    let d = a.rows();
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..d).map(|i| a[(i, j)]).collect();
            cholesky_solve(lb, &col)[j]
        })
        .sum()
}

fn mahalanobis(l: &Matrix, diff: &[f64]) -> f64 {
    let x = cholesky_solve(l, diff);
    x.iter().zip(diff).map(|(a, b)| a * b).sum()
}

/// D_KL(p ‖ q). Asymmetric.
pub fn kl_divergence(p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<f64> {
    check_dims(p, q)?;
    let (sp, sq) = (p.cov(), q.cov());
    let lq = factor(&sq, "second")?;
    let lp = factor(&sp, "first")?;
    let diff: Vec<f64> = q.mean().iter().zip(p.mean()).map(|(a, b)| a - b).collect();
    let v = 0.5
        * (trace_solve(&lq, &sp) + mahalanobis(&lq, &diff) - p.dim() as f64
            + cholesky_log_det(&lq)
            - cholesky_log_det(&lp));
    clamp_distance(v, "KL divergence")
}

/// Bhattacharyya distance with the averaged covariance (Σp + Σq)/2.
pub fn bhattacharyya(p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<f64> {
    check_dims(p, q)?;
    let (sp, sq) = (p.cov(), q.cov());
    let avg = sp.add(&sq)?.scale(0.5);
    let l = factor(&avg, "averaged")?;
    let lp = factor(&sp, "first")?;
    let lq = factor(&sq, "second")?;
    let diff: Vec<f64> = p.mean().iter().zip(q.mean()).map(|(a, b)| a - b).collect();
    let v = 0.125 * mahalanobis(&l, &diff)
        + 0.5 * (cholesky_log_det(&l) - 0.5 * (cholesky_log_det(&lp) + cholesky_log_det(&lq)));
    clamp_distance(v, "Bhattacharyya distance")
}

/// Which closed-form distance to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    W2,
    Kl,
    Bhattacharyya,
}

impl Distance {
    pub fn eval(self, p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<f64> {
        match self {
            Distance::W2 => w2_squared(p, q),
            Distance::Kl => kl_divergence(p, q),
            Distance::Bhattacharyya => bhattacharyya(p, q),
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2" => Ok(Distance::W2),
            "kl" => Ok(Distance::Kl),
            "bhat" => Ok(Distance::Bhattacharyya),
            other => Err(FedError::Invalid(format!(
                "unknown distance '{other}' (expected w2, kl or bhat)"
            ))),
        }
    }
}

/// Full pairwise matrix `m[i][j] = dist(gs[i], gs[j])`.
pub fn pairwise(gs: &[GaussianEmbedding], dist: Distance) -> Result<Vec<Vec<f64>>> {
    gs.iter()
        .map(|p| gs.iter().map(|q| dist.eval(p, q)).collect())
        .collect()
}
