use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `n` points of dimension `dim`, stored row-major.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape("points", format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn scalar(data: &'a [f64]) -> Self {
        Self { data, dim: 1 }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("pearson", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1 with ties given their average rank.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::invalid(format!(
            "spearman needs two equal-length sequences of at least 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    pearson(&mid_ranks(a), &mid_ranks(b))
}

/// Plug-in mutual information (bits) of the equal-width 2-D histogram over the sample range.
pub fn mi_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if bins == 0 || a.len() != b.len() {
        return Err(Error::invalid("mi_histogram needs bins >= 1 and equal lengths"));
    }
    if a.len() < 4 * bins * bins {
        return Err(Error::invalid(format!(
            "{} samples are too few for {bins} bins (need {})",
            a.len(),
            4 * bins * bins
        )));
    }
    let bin = |v: &[f64]| -> Vec<usize> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        v.iter()
            .map(|&x| {
                if width > 0.0 {
                    (((x - lo) / width) as usize).min(bins - 1)
                } else {
                    0
                }
            })
            .collect()
    };
    let (ba, bb) = (bin(a), bin(b));
    let n = a.len() as f64;
    let mut counts = vec![0usize; bins * bins];
    for (&i, &j) in ba.iter().zip(&bb) {
        counts[i * bins + j] += 1;
    }
    let pa: Vec<f64> = (0..bins).map(|i| (0..bins).map(|j| counts[i * bins + j]).sum::<usize>() as f64 / n).collect();
    let pb: Vec<f64> = (0..bins).map(|j| (0..bins).map(|i| counts[i * bins + j]).sum::<usize>() as f64 / n).collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = counts[i * bins + j] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances `i < j`.
pub fn median_distance(p: Points) -> Result<f64> {
    let n = p.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(p.row(i), p.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::Degenerate("no pairs for the median heuristic".into()));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { (d[m / 2 - 1] + d[m / 2]) / 2.0 };
    if med <= 0.0 {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(med)
}

/// Gaussian kernel matrix `exp(-|x - y|^2 / (2 sigma^2))` with `sigma` the median distance.
fn kernel(p: Points) -> Result<Vec<f64>> {
    let sigma = median_distance(p)?;
    let n = p.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = (-sq_dist(p.row(i), p.row(j)) / (2.0 * sigma * sigma)).exp();
        }
    }
    Ok(k)
}

/// `H K H` with `H = I - 11^T / n`.
fn center(k: &[f64], n: usize) -> Vec<f64> {
    let rows: Vec<f64> = (0..n).map(|i| mean(&k[i * n..(i + 1) * n])).collect();
    let cols: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
    let all = mean(&rows);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - rows[i] - cols[j] + all;
        }
    }
    out
}

fn check_pair(a: Points, b: Points) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape("hsic", format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 8 {
        return Err(Error::invalid(format!("hsic needs at least 8 samples, got {}", a.len())));
    }
    Ok(a.len())
}

/// Biased HSIC estimate `tr(K H L H) / n^2` with median-heuristic Gaussian kernels.
pub fn hsic(a: Points, b: Points) -> Result<f64> {
    let n = check_pair(a, b)?;
    let kc = center(&kernel(a)?, n);
    let l = kernel(b)?;
    Ok(kc.iter().zip(&l).map(|(x, y)| x * y).sum::<f64>() / (n * n) as f64)
}

/// HSIC statistic together with the empirical `quantile` of its null
/// distribution under `perms` seeded permutations of `b`.
pub fn hsic_permutation_test(a: Points, b: Points, perms: usize, quantile: f64, seed: u64) -> Result<(f64, f64)> {
    let n = check_pair(a, b)?;
    if perms == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid("need perms >= 1 and quantile in [0, 1]"));
    }
    let kc = center(&kernel(a)?, n);
    let l = kernel(b)?;
    let stat = |p: &[usize]| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let li = &l[p[i] * n..(p[i] + 1) * n];
            let ki = &kc[i * n..(i + 1) * n];
            for j in 0..n {
                total += ki[j] * li[p[j]];
            }
        }
        total / (n * n) as f64
    };
    let identity: Vec<usize> = (0..n).collect();
    let observed = stat(&identity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null: Vec<f64> = (0..perms)
        .map(|_| {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            stat(&p)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    // Smallest value with at least `quantile` of the null mass at or below it.
    let idx = ((quantile * perms as f64).ceil() as usize).clamp(1, perms) - 1;
    Ok((observed, null[idx]))
}

pub fn hsic_permutation_threshold(a: Points, b: Points, perms: usize, quantile: f64, seed: u64) -> Result<f64> {
    hsic_permutation_test(a, b, perms, quantile, seed).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniforms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn spearman_monotone_maps() {
        let a = uniforms(50, 1);
        let e: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let c: Vec<f64> = a.iter().map(|v| -v.powi(3)).collect();
        assert!((spearman(&a, &e).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_matches_rank_oracle_with_ties() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let b = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0];
        assert_eq!(mid_ranks(&a), vec![4.0, 1.5, 5.0, 1.5, 6.0, 8.0, 3.0, 7.0]);
        // Mid-ranks of b: 1.0 x2 -> 1.5, 2.0 x2 -> 3.5, 7.0 -> 5, 8.0 x3 -> 7.
        let rb = [3.5, 5.0, 1.5, 7.0, 3.5, 7.0, 1.5, 7.0];
        let ra = mid_ranks(&a);
        let m = 4.5;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        let va: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
        let vb: f64 = rb.iter().map(|y| (y - m) * (y - m)).sum();
        assert!((spearman(&a, &b).unwrap() - cov / (va * vb).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn histogram_mi_cases() {
        let a = uniforms(10_000, 2);
        let b = uniforms(10_000, 3);
        assert!(mi_histogram(&a, &b, 16).unwrap() < 0.08);
        let same = mi_histogram(&a, &a, 16).unwrap();
        assert!((same - 4.0).abs() < 0.02, "{same}");
        assert_eq!(mi_histogram(&a, &vec![2.0; 10_000], 16).unwrap(), 0.0);
        assert!(mi_histogram(&a[..100], &b[..100], 16).is_err());
    }

    #[test]
    fn hsic_matches_matrix_oracle() {
        let a = uniforms(8, 4);
        let b: Vec<f64> = a.iter().zip(uniforms(8, 5)).map(|(x, e)| x * x + 0.3 * e).collect();
        // Explicit matrices: K, L, H, then tr(K H L H) / n^2 by full products.
        let n = 8;
        let med = |v: &[f64]| {
            let mut d = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    d.push((v[i] - v[j]).abs());
                }
            }
            d.sort_by(f64::total_cmp);
            (d[13] + d[14]) / 2.0
        };
        let gram = |v: &[f64]| {
            let s = med(v);
            nalgebra::DMatrix::from_fn(n, n, |i, j| (-(v[i] - v[j]).powi(2) / (2.0 * s * s)).exp())
        };
        let h = nalgebra::DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
        let expected = (gram(&a) * &h * gram(&b) * &h).trace() / (n * n) as f64;
        let got = hsic(Points::scalar(&a), Points::scalar(&b)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn hsic_calibration_single_trial() {
        let a = uniforms(512, 6);
        let b = uniforms(512, 7);
        let (stat, thr) = hsic_permutation_test(Points::scalar(&a), Points::scalar(&b), 200, 0.95, 0).unwrap();
        assert!(stat < thr);
        let (stat, thr) = hsic_permutation_test(Points::scalar(&a), Points::scalar(&a), 200, 0.999, 0).unwrap();
        assert!(stat > thr);
    }

    #[test]
    fn hsic_rejects_constant_input() {
        let a = uniforms(16, 1);
        assert!(matches!(hsic(Points::scalar(&a), Points::scalar(&[0.5; 16])), Err(Error::Degenerate(_))));
        assert!(hsic(Points::scalar(&a[..4]), Points::scalar(&a[..4])).is_err());
    }

    proptest! {
        #[test]
        fn hsic_is_symmetric_and_shift_invariant(seed in 0u64..500, shift in -100.0f64..100.0) {
            let a = uniforms(24, seed);
            let b: Vec<f64> = uniforms(24, seed + 1000).iter().zip(&a).map(|(x, y)| x + y).collect();
            let ab = hsic(Points::scalar(&a), Points::scalar(&b)).unwrap();
            let ba = hsic(Points::scalar(&b), Points::scalar(&a)).unwrap();
            let moved: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let mb = hsic(Points::scalar(&moved), Points::scalar(&b)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ab - mb).abs() < 1e-12);
        }

        #[test]
        fn spearman_in_range(a in proptest::collection::vec(-1e3f64..1e3, 3..50), seed in 0u64..100) {
            let b = uniforms(a.len(), seed);
            if let Ok(r) = spearman(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
