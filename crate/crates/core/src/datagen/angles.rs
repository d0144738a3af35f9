use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Condition, DatasetMeta, PairedDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// `x = (cos s, sin s, cos t, sin t, 0, ...)`.
    Identity,
    /// `x = W u + 0.25 tanh(V u)` with fixed random `W`, `V`.
    Smooth,
}

/// Two independent rotation angles observed through a fixed embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnglesConfig {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_kind")]
    pub embedding: EmbeddingKind,
    /// Seed of the embedding matrices, separate from the sampling seed so one
    /// map can generate train and held-out sets.
    #[serde(default)]
    pub embed_seed: u64,
}

fn default_embed_dim() -> usize {
    8
}

fn default_kind() -> EmbeddingKind {
    EmbeddingKind::Smooth
}

impl Default for AnglesConfig {
    fn default() -> Self {
        Self {
            embed_dim: default_embed_dim(),
            embedding: default_kind(),
            embed_seed: 0,
        }
    }
}

pub(crate) struct Embedding {
    kind: EmbeddingKind,
    dim: usize,
    w: Vec<f64>,
    v: Vec<f64>,
}

impl Embedding {
    pub(crate) fn new(cfg: &AnglesConfig) -> Result<Self> {
        if cfg.embed_dim < 4 {
            return Err(Error::invalid(format!("embed_dim must be >= 4, got {}", cfg.embed_dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embed_seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|z: f64| z / 2.0)
                .collect()
        };
        let w = draw(cfg.embed_dim * 4);
        let v = draw(cfg.embed_dim * 4);
        Ok(Self {
            kind: cfg.embedding,
            dim: cfg.embed_dim,
            w,
            v,
        })
    }

    pub(crate) fn apply(&self, theta_s: f64, theta_t: f64) -> Vec<f64> {
        let u = [theta_s.cos(), theta_s.sin(), theta_t.cos(), theta_t.sin()];
        match self.kind {
            EmbeddingKind::Identity => {
                let mut x = vec![0.0; self.dim];
                x[..4].copy_from_slice(&u);
                x
            }
            EmbeddingKind::Smooth => (0..self.dim)
                .map(|i| {
                    let row = |m: &[f64]| (0..4).map(|j| m[i * 4 + j] * u[j]).sum::<f64>();
                    row(&self.w) + 0.25 * row(&self.v).tanh()
                })
                .collect(),
        }
    }
}

/// `x = embed(cos s, sin s, cos t, sin t)`, `t = (cos t, sin t)`, hidden `s` in `[0, 2 pi)`.
pub fn gen_rotating_angles_toy(n: usize, seed: u64, cfg: &AnglesConfig) -> Result<PairedDataset> {
    let emb = Embedding::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * cfg.embed_dim);
    let mut t = Vec::with_capacity(n * 2);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let ts = rng.random_range(0.0..TAU);
        let tt = rng.random_range(0.0..TAU);
        x.extend(emb.apply(ts, tt));
        t.extend([tt.cos(), tt.sin()]);
        s.push(ts);
    }
    let meta = DatasetMeta {
        generator: "angles".into(),
        seed,
        params: serde_json::json!({ "n": n, "angles": cfg }),
        segment_len: None,
        lags: None,
    };
    PairedDataset::new(
        Tensor::new(vec![n, cfg.embed_dim], x)?,
        Condition::Numeric(Tensor::new(vec![n, 2], t)?),
        Some(Tensor::new(vec![n, 1], s)?),
        meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_embedding_traces_circle() {
        let cfg = AnglesConfig {
            embed_dim: 5,
            embedding: EmbeddingKind::Identity,
            embed_seed: 0,
        };
        let d = gen_rotating_angles_toy(200, 1, &cfg).unwrap();
        for row in d.x.data().chunks(5) {
            assert!((row[0].hypot(row[1]) - 1.0).abs() < 1e-12);
            assert_eq!(row[4], 0.0);
        }
        assert!(gen_rotating_angles_toy(5, 1, &AnglesConfig { embed_dim: 3, ..cfg }).is_err());
    }

    #[test]
    fn condition_is_uncorrelated_with_hidden_angle() {
        let n = 10_000;
        let d = gen_rotating_angles_toy(n, 4, &AnglesConfig::default()).unwrap();
        let Condition::Numeric(t) = &d.t else { unreachable!() };
        let cos_s: Vec<f64> = d.s.as_ref().unwrap().data().iter().map(|v| v.cos()).collect();
        for c in 0..2 {
            let tc: Vec<f64> = (0..n).map(|i| t.data()[i * 2 + c]).collect();
            let m1 = tc.iter().sum::<f64>() / n as f64;
            let m2 = cos_s.iter().sum::<f64>() / n as f64;
            let cov: f64 = tc.iter().zip(&cos_s).map(|(a, b)| (a - m1) * (b - m2)).sum();
            let va: f64 = tc.iter().map(|a| (a - m1).powi(2)).sum();
            let vb: f64 = cos_s.iter().map(|b| (b - m2).powi(2)).sum();
            assert!((cov / (va * vb).sqrt()).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = AnglesConfig::default();
        assert_eq!(
            gen_rotating_angles_toy(64, 2, &cfg).unwrap(),
            gen_rotating_angles_toy(64, 2, &cfg).unwrap()
        );
    }
}
