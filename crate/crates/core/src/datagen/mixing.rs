use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::angles::{self, AnglesConfig};
use super::dataset::{Condition, DatasetMeta, PairedDataset};
use super::fecg::FecgConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Default 2x2 mixing matrix.
pub const DEFAULT_A: [[f64; 2]; 2] = [[1.0, 1.0], [1.0, -1.0]];

const MIN_DET: f64 = 1e-6;

/// The generative map `f` of a synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixingSpec {
    Linear {
        #[serde(default = "default_a")]
        a: [[f64; 2]; 2],
    },
    SoftplusNonlinear {
        #[serde(default = "default_a")]
        a: [[f64; 2]; 2],
    },
    Angles(AnglesConfig),
    Fecg(FecgConfig),
}

fn default_a() -> [[f64; 2]; 2] {
    DEFAULT_A
}

fn det(a: &[[f64; 2]; 2]) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn check_matrix(a: &[[f64; 2]; 2]) -> Result<()> {
    let d = det(a);
    if !(d.abs() > MIN_DET) {
        return Err(Error::invalid(format!(
            "mixing matrix is singular or near-singular (|det| = {:e})",
            d.abs()
        )));
    }
    Ok(())
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// `n` i.i.d. pairs `(s, t)` uniform on `[0, 1)^2`.
pub fn gen_uniform_sources(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        s.push(rng.random::<f64>());
        t.push(rng.random::<f64>());
    }
    (s, t)
}

fn mix(s: &[f64], t: &[f64], a: &[[f64; 2]; 2], act: fn(f64) -> f64) -> Result<Vec<[f64; 2]>> {
    check_matrix(a)?;
    if s.len() != t.len() {
        return Err(Error::shape("mix", format!("{} sources vs {} conditions", s.len(), t.len())));
    }
    Ok(s.iter()
        .zip(t)
        .map(|(&s, &t)| [act(a[0][0] * s + a[0][1] * t), act(a[1][0] * s + a[1][1] * t)])
        .collect())
}

/// `x = A [s, t]`.
pub fn mix_linear(s: &[f64], t: &[f64], a: &[[f64; 2]; 2]) -> Result<Vec<[f64; 2]>> {
    mix(s, t, a, |v| v)
}

/// `x = softplus(A [s, t])`.
pub fn mix_nonlinear(s: &[f64], t: &[f64], a: &[[f64; 2]; 2]) -> Result<Vec<[f64; 2]>> {
    mix(s, t, a, softplus)
}

/// Two-dimensional dataset: `x [N, 2]`, `t [N, 1]`, hidden `s [N, 1]`.
pub fn gen_2d(spec: &MixingSpec, n: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let (s, t) = gen_uniform_sources(n, seed);
    let (x, id) = match spec {
        MixingSpec::Linear { a } => (mix_linear(&s, &t, a)?, "2d-linear"),
        MixingSpec::SoftplusNonlinear { a } => (mix_nonlinear(&s, &t, a)?, "2d-nonlinear"),
        _ => return Err(Error::invalid("gen_2d needs a linear or softplus mixing spec")),
    };
    let meta = DatasetMeta {
        generator: id.into(),
        seed,
        params: serde_json::json!({ "n": n, "mixing": spec, "source_range": [0.0, 1.0] }),
        segment_len: None,
        lags: None,
    };
    PairedDataset::new(
        Tensor::new(vec![n, 2], x.into_iter().flatten().collect())?,
        Condition::Numeric(Tensor::new(vec![n, 1], t)?),
        Some(Tensor::new(vec![n, 1], s)?),
        meta,
    )
}

fn det_n(mut m: Vec<Vec<f64>>) -> f64 {
    // Gaussian elimination with partial pivoting.
    let n = m.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    d
}

/// Minimum absolute Jacobian determinant of `(s, t) -> x` over seeded probe
/// points, by central finite differences.
///
/// For the angles embedding, which maps two angles into a higher dimension,
/// the volume factor `sqrt(det(J^T J))` takes the place of `|det J|`.
pub fn verify_invertibility(spec: &MixingSpec, n_probes: usize, seed: u64) -> Result<f64> {
    let f: Box<dyn Fn(f64, f64) -> Vec<f64>> = match spec {
        MixingSpec::Linear { a } => {
            check_matrix(a)?;
            let a = *a;
            Box::new(move |s, t| mix_linear(&[s], &[t], &a).unwrap()[0].to_vec())
        }
        MixingSpec::SoftplusNonlinear { a } => {
            check_matrix(a)?;
            let a = *a;
            Box::new(move |s, t| mix_nonlinear(&[s], &[t], &a).unwrap()[0].to_vec())
        }
        MixingSpec::Angles(cfg) => {
            let emb = angles::Embedding::new(cfg)?;
            Box::new(move |s, t| emb.apply(s, t))
        }
        MixingSpec::Fecg(_) => {
            return Err(Error::NotApplicable(
                "the fECG generator is a pulse-train simulator, not a differentiable map".into(),
            ))
        }
    };
    let (lo, hi) = match spec {
        MixingSpec::Angles(_) => (0.0, std::f64::consts::TAU),
        _ => (0.0, 1.0),
    };
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min = f64::INFINITY;
    for _ in 0..n_probes {
        let s = rng.random_range(lo..hi);
        let t = rng.random_range(lo..hi);
        let ds: Vec<f64> = f(s + h, t).iter().zip(f(s - h, t)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let dt: Vec<f64> = f(s, t + h).iter().zip(f(s, t - h)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let value = if ds.len() == 2 {
            det_n(vec![vec![ds[0], dt[0]], vec![ds[1], dt[1]]]).abs()
        } else {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let gram = vec![vec![dot(&ds, &ds), dot(&ds, &dt)], vec![dot(&dt, &ds), dot(&dt, &dt)]];
            det_n(gram).max(0.0).sqrt()
        };
        min = min.min(value);
    }
    Ok(min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn uniform_sources_properties() {
        let (s, t) = gen_uniform_sources(10_000, 3);
        assert!(s.iter().chain(&t).all(|v| (0.0..=1.0).contains(v)));
        assert!(pearson(&s, &t).abs() < 3.0 / 100.0);
        assert_eq!(gen_uniform_sources(10_000, 3), (s, t));
    }

    #[test]
    fn mixing_hand_values() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(mix_linear(&[0.2], &[0.7], &id).unwrap(), vec![[0.2, 0.7]]);
        assert_eq!(mix_linear(&[0.5], &[0.5], &DEFAULT_A).unwrap(), vec![[1.0, 0.0]]);
        let nl = mix_nonlinear(&[0.5], &[0.5], &DEFAULT_A).unwrap()[0];
        assert!((nl[0] - (1.0 + (-1f64).exp().ln_1p())).abs() < 1e-15);
        assert!((nl[0] - 1.3132616875).abs() < 1e-9);
        assert!((nl[1] - 2f64.ln()).abs() < 1e-15);
        assert!(mix_linear(&[0.1], &[0.1], &[[1.0, 2.0], [2.0, 4.0]]).is_err());
    }

    #[test]
    fn softplus_jacobian_nonzero() {
        // Analytic Jacobian of softplus(A u): diag(sigmoid(A u)) A, det = sig0 sig1 det A.
        let spec = MixingSpec::SoftplusNonlinear { a: DEFAULT_A };
        let min = verify_invertibility(&spec, 100, 0).unwrap();
        assert!(min > 0.0);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // Lower bound over [0,1]^2: sigmoid(s+t) >= 0.5, sigmoid(s-t) >= sigmoid(-1).
        assert!(min >= 0.5 * sig(-1.0) * 2.0 - 1e-6);
    }

    #[test]
    fn linear_jacobian_is_det() {
        let a = [[2.0, 0.5], [0.3, 1.0]];
        let v = verify_invertibility(&MixingSpec::Linear { a }, 20, 1).unwrap();
        assert!((v - det(&a).abs()).abs() < 1e-8);
        assert!(verify_invertibility(&MixingSpec::Linear { a: [[1.0, 1.0], [1.0, 1.0]] }, 5, 0).is_err());
        assert!(matches!(
            verify_invertibility(&MixingSpec::Fecg(FecgConfig::default()), 5, 0),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn two_d_dataset_shapes() {
        let d = gen_2d(&MixingSpec::Linear { a: DEFAULT_A }, 50, 9).unwrap();
        assert_eq!(d.x.shape(), &[50, 2]);
        assert_eq!(d.s.as_ref().unwrap().shape(), &[50, 1]);
        assert_eq!(d, gen_2d(&MixingSpec::Linear { a: DEFAULT_A }, 50, 9).unwrap());
    }
}
