use nalgebra::{DMatrix, DVector};

use crate::distill::FeatureExtractor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagonal shrinkage added to both covariances.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::config("Fréchet distance needs a non-empty set"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::config("feature rows have different widths"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let mj = mean[j];
        centered.column_mut(j).add_scalar_mut(-mj);
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    for j in 0..d {
        cov[(j, j)] += COVARIANCE_SHRINKAGE;
    }
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` over feature rows.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, sa) = moments(a)?;
    let (mb, sb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::config("feature sets have different widths"));
    }
    // Tr((S_a S_b)^(1/2)) = Tr((R S_b R)^(1/2)) with R = S_a^(1/2); the
    // inner product is symmetric, so a symmetric eigensolver suffices.
    let r = sqrt_psd(&sa);
    let inner = &r * &sb * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between two image sets in the extractor's pooled
/// embedding. This is a desk-scale proxy and not comparable to published
/// Inception-based scores.
pub fn proxy_fid(set_a: &Tensor, set_b: &Tensor, f: &FeatureExtractor) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::config("proxy FID needs non-empty image sets"));
    }
    let ea = embed_chunked(set_a, f)?;
    let eb = embed_chunked(set_b, f)?;
    frechet_distance(&ea, &eb)
}

/// Pooled embeddings of a large set, computed in chunks.
pub fn embed_chunked(set: &Tensor, f: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let n = set.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        out.extend(f.pooled(&set.select(&idx))?);
    }
    Ok(out)
}
