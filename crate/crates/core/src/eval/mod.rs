//! Evaluation metrics: PCA, periodic presence of the fetal and maternal
//! trains, sample dependence between code and condition, and plot exports.

mod export;
mod pca;
mod presence;

pub use export::{
    import_coloring_csv, pca_coloring, pca_coloring_export, svg_scatter, write_coloring_csv, ColoredPoint, PALETTE,
};
pub use pca::{pca, symmetric_eigen, Pca};
pub use presence::{
    one_sided_autocorrelation, presence_ratio, principal_signal, PresenceReport, SegmentPresence, MATERNAL_FLOOR,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{Condition, SegmentLags};
use crate::error::{Error, Result};
use crate::infometrics::{hsic_permutation_test, mi_histogram, spearman, Points};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Histogram bins per axis for the mutual-information estimate.
    pub bins: usize,
    /// HSIC is computed on a seeded subsample of at most this many points.
    pub hsic_max_samples: usize,
    pub hsic_perms: usize,
    pub hsic_quantile: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bins: 16,
            hsic_max_samples: 1000,
            hsic_perms: 200,
            hsic_quantile: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsicSummary {
    pub statistic: f64,
    pub threshold: f64,
    /// `statistic <= threshold`: independence is not rejected.
    pub independent: bool,
    pub samples: usize,
}

/// All metrics that the supplied inputs allow; missing inputs leave fields absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_x: Option<PresenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_code: Option<PresenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_code: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hsic_code_condition: Option<HsicSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_code_source: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi_code_condition_bits: Option<f64>,
    pub settings: EvalSettings,
}

/// Flattens `[N, d]` rows or `[S, C, T]` sequences into points of dimension `d` or `C`.
pub fn as_points(t: &Tensor) -> Result<(Vec<f64>, usize)> {
    match t.shape() {
        [_] => Ok((t.data().to_vec(), 1)),
        [_, d] => Ok((t.data().to_vec(), *d)),
        [s, c, len] => {
            let mut out = Vec::with_capacity(t.data().len());
            for seg in 0..*s {
                for k in 0..*len {
                    for ch in 0..*c {
                        out.push(t.data()[(seg * c + ch) * len + k]);
                    }
                }
            }
            Ok((out, *c))
        }
        other => Err(Error::shape("as_points", format!("unsupported shape {other:?}"))),
    }
}

fn column(data: &[f64], dim: usize, j: usize) -> Vec<f64> {
    data.iter().skip(j).step_by(dim).copied().collect()
}

/// Sorted seeded sample of at most `max` indices from `0..m`.
pub fn subsample_indices(m: usize, max: usize, seed: u64) -> Vec<usize> {
    if m <= max {
        return (0..m).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, m, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Spearman correlation of the code coordinate most associated with `source`.
pub fn best_spearman(code: &[f64], dim: usize, source: &[f64]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for j in 0..dim {
        let r = spearman(&column(code, dim, j), source)?;
        if best.is_none_or(|b| r.abs() > b.abs()) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::invalid("empty code"))
}

/// Consolidated metrics.
///
/// `inputs` and `lags` feed the presence ratios (sequence data only),
/// `conditions` feeds HSIC and MI, and `ground_truth` feeds Spearman.
pub fn evaluation_report(
    codes: &Tensor,
    inputs: Option<&Tensor>,
    conditions: Option<&Condition>,
    ground_truth: Option<&Tensor>,
    lags: Option<&[SegmentLags]>,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let n = codes.shape()[0];
    for (name, len) in [
        ("inputs", inputs.map(|t| t.shape()[0])),
        ("conditions", conditions.map(|c| c.len())),
        ("ground truth", ground_truth.map(|t| t.shape()[0])),
    ] {
        if let Some(len) = len {
            if len != n {
                return Err(Error::invalid(format!("{name} have {len} rows, codes have {n}")));
            }
        }
    }
    let mut report = MetricsReport {
        presence_x: None,
        presence_code: None,
        r_x: None,
        r_code: None,
        hsic_code_condition: None,
        spearman_code_source: None,
        mi_code_condition_bits: None,
        settings: *settings,
    };
    if let Some(lags) = lags {
        if let Some(x) = inputs.filter(|x| x.shape().len() == 3) {
            let p = presence_ratio(x, lags)?;
            report.r_x = p.r;
            report.presence_x = Some(p);
        }
        if codes.shape().len() == 3 {
            let p = presence_ratio(codes, lags)?;
            report.r_code = p.r;
            report.presence_code = Some(p);
        }
    }

    let (code_pts, code_dim) = as_points(codes)?;
    let m = code_pts.len() / code_dim;
    let pick = subsample_indices(m, settings.hsic_max_samples, settings.seed);
    let gather = |data: &[f64], dim: usize| -> Vec<f64> {
        pick.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect()
    };

    if let Some(cond) = conditions {
        let (cond_pts, cond_dim) = as_points(&cond.to_tensor())?;
        let (a, b) = (gather(&code_pts, code_dim), gather(&cond_pts, cond_dim));
        let (statistic, threshold) = hsic_permutation_test(
            Points::new(&a, code_dim)?,
            Points::new(&b, cond_dim)?,
            settings.hsic_perms,
            settings.hsic_quantile,
            settings.seed,
        )?;
        report.hsic_code_condition = Some(HsicSummary {
            statistic,
            threshold,
            independent: statistic <= threshold,
            samples: pick.len(),
        });
        if code_dim == 1 && cond_dim == 1 && m >= 4 * settings.bins * settings.bins {
            report.mi_code_condition_bits = Some(mi_histogram(&code_pts, &cond_pts, settings.bins)?);
        }
    }

    if let Some(s) = ground_truth {
        let (s_pts, s_dim) = as_points(s)?;
        if s_dim == 1 {
            report.spearman_code_source = Some(best_spearman(&code_pts, code_dim, &s_pts)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_2d, gen_synthetic_fecg, FecgConfig, MixingSpec, DEFAULT_A};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn report_on_raw_fecg() {
        let d = gen_synthetic_fecg(&FecgConfig::default(), 2).unwrap();
        let Condition::Numeric(t) = &d.t else { unreachable!() };
        let lags = d.meta.lags.clone().unwrap();
        let settings = EvalSettings {
            hsic_max_samples: 300,
            hsic_perms: 50,
            ..EvalSettings::default()
        };
        let rep = evaluation_report(&d.x, Some(&d.x), Some(&d.t), None, Some(&lags), &settings).unwrap();
        assert!(rep.r_x.unwrap() < 1.0);
        assert_eq!(rep.r_x, rep.r_code);
        assert!(rep.spearman_code_source.is_none());
        assert!(!rep.hsic_code_condition.as_ref().unwrap().independent);
        let json = crate::io::to_json(&rep);
        let back: MetricsReport = crate::io::parse_json(&json).unwrap();
        assert_eq!(back, rep);
        assert_eq!(t.shape()[1], 3);
    }

    #[test]
    fn source_itself_is_perfectly_ranked() {
        let d = gen_2d(&MixingSpec::Linear { a: DEFAULT_A }, 5000, 0).unwrap();
        let s = d.s.clone().unwrap();
        let rep = evaluation_report(&s, None, Some(&d.t), Some(&s), None, &EvalSettings::default()).unwrap();
        assert_eq!(rep.spearman_code_source, Some(1.0));
        assert!(rep.mi_code_condition_bits.unwrap() < 0.08);
        assert!(rep.presence_x.is_none() && rep.r_code.is_none());
        assert_eq!(rep.hsic_code_condition.as_ref().unwrap().samples, 1000);
        let none = evaluation_report(&s, None, None, None, None, &EvalSettings::default()).unwrap();
        assert!(none.hsic_code_condition.is_none() && none.spearman_code_source.is_none());
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let a = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(evaluation_report(&a, None, None, Some(&b), None, &EvalSettings::default()).is_err());
    }

    #[test]
    fn jacobi_top_vector_aligns_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let b = nalgebra::DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + nalgebra::DMatrix::identity(5, 5) * 0.1;
            let (_, vecs) = symmetric_eigen(a.as_slice(), 5).unwrap();
            let eig = a.clone().symmetric_eigen();
            let top = eig.eigenvalues.imax();
            let oracle = eig.eigenvectors.column(top);
            let cos: f64 = vecs[0].iter().zip(oracle.iter()).map(|(x, y)| x * y).sum();
            assert!(cos.abs() >= 1.0 - 1e-8);
        }
    }

    #[test]
    fn oracle_extractor_beats_mixture() {
        for alpha in [0.05, 0.2, 0.5, 0.9] {
            let d = gen_synthetic_fecg(&FecgConfig { alpha, n_segments: 3, ..FecgConfig::default() }, 3).unwrap();
            let lags = d.meta.lags.clone().unwrap();
            let rx = presence_ratio(&d.x, &lags).unwrap().ratio_or_inf();
            let rs = presence_ratio(d.s.as_ref().unwrap(), &lags).unwrap().ratio_or_inf();
            assert!(rs > rx, "alpha {alpha}: {rs} <= {rx}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn autocorrelation_is_bounded(seed in 0u64..1000, len in 20usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = one_sided_autocorrelation(&x, len / 2).unwrap();
            prop_assert!((a[0] - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|v| v.abs() <= 1.0 + 1e-9));
        }

        #[test]
        fn pca_projections_are_centered(seed in 0u64..1000, n in 5usize..40, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let k = d.min(n - 1);
            let p = pca(&data, n, d, k).unwrap();
            for c in 0..k {
                let m: f64 = (0..n).map(|i| p.projections[i * k + c]).sum::<f64>() / n as f64;
                prop_assert!(m.abs() <= 1e-10);
            }
        }
    }
}
