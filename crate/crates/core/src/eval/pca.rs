use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric `d x d` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as rows.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != d * d {
        return Err(Error::shape("symmetric_eigen", format!("{} values for {d}x{d}", a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].total_cmp(&m[i * d + i]));
    let values = order.iter().map(|&i| m[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..d).map(|k| v[k * d + i]).collect())
        .collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `d`, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// `n x k`, row-major.
    pub projections: Vec<f64>,
    /// Variance along each component.
    pub explained_variance: Vec<f64>,
    /// Fraction of the total variance along each component.
    pub explained_ratio: Vec<f64>,
}

/// Principal components of `n` samples of dimension `d` (row-major).
///
/// Each component is signed so that its largest-magnitude entry is positive.
pub fn pca(data: &[f64], n: usize, d: usize, k: usize) -> Result<Pca> {
    if data.len() != n * d {
        return Err(Error::shape("pca", format!("{} values for {n}x{d}", data.len())));
    }
    if n < 2 || k == 0 || k > d {
        return Err(Error::invalid(format!("pca needs n > 1 and 1 <= k <= d, got n={n}, d={d}, k={k}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= (n - 1) as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (values, mut vectors) = symmetric_eigen(&cov, d)?;
    let top = values[0].max(0.0);
    let rank = values.iter().filter(|&&v| v > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
    if k > rank {
        return Err(Error::invalid(format!("requested {k} components but the data has rank {rank}")));
    }
    vectors.truncate(k);
    for v in &mut vectors {
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let mut projections = vec![0.0; n * k];
    for i in 0..n {
        for (c, v) in vectors.iter().enumerate() {
            projections[i * k + c] = (0..d).map(|j| (data[i * d + j] - mean[j]) * v[j]).sum();
        }
    }
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
    let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
    Ok(Pca {
        mean,
        components: vectors,
        projections,
        explained_variance,
        explained_ratio,
    })
}
