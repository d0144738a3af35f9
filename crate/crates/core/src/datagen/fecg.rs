use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Condition, DatasetMeta, PairedDataset, SegmentLags};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Synthetic abdominal/thorax recording with maternal and fetal pulse trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FecgConfig {
    /// Abdominal channels.
    pub n_a: usize,
    /// Thorax channels.
    pub n_t: usize,
    /// Samples per segment.
    pub n_t_samples: usize,
    pub n_segments: usize,
    /// Maternal beat period in samples.
    pub tau_m: usize,
    /// Fetal beat period in samples.
    pub tau_f: usize,
    /// Fetal amplitude relative to maternal.
    pub alpha: f64,
    /// Additive white-noise standard deviation.
    pub sigma: f64,
    /// Gaussian bump widths (standard deviation, samples).
    pub width_m: f64,
    pub width_f: f64,
}

impl Default for FecgConfig {
    fn default() -> Self {
        Self {
            n_a: 24,
            n_t: 3,
            n_t_samples: 2000,
            n_segments: 8,
            tau_m: 430,
            tau_f: 270,
            alpha: 0.2,
            sigma: 0.01,
            width_m: 8.0,
            width_f: 4.0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl FecgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_t == 0 || self.n_t_samples == 0 || self.n_segments == 0 {
            return Err(Error::invalid("channel counts, segment length and segment count must be positive"));
        }
        if self.tau_m == 0 || self.tau_f == 0 {
            return Err(Error::invalid("beat periods must be positive"));
        }
        // Periods whose beats realign within one segment make the two lags
        // indistinguishable to the autocorrelation metric.
        let lcm = self.tau_m / gcd(self.tau_m, self.tau_f) * self.tau_f;
        if lcm <= self.n_t_samples {
            return Err(Error::invalid(format!(
                "periods {} and {} are commensurate within a segment (lcm {lcm} <= {})",
                self.tau_m, self.tau_f, self.n_t_samples
            )));
        }
        if 2 * self.tau_m.max(self.tau_f) > self.n_t_samples {
            return Err(Error::invalid("segments must span at least two periods of each train"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be finite and >= 0"));
        }
        if !(self.width_m > 0.0 && self.width_f > 0.0) {
            return Err(Error::invalid("bump widths must be positive"));
        }
        Ok(())
    }
}

/// Unit-height Gaussian bumps every `period` samples starting at `phase`.
pub fn pulse_train(len: usize, period: usize, phase: f64, width: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let reach = (6.0 * width).ceil() as isize;
    let mut center = phase - period as f64;
    while center < len as f64 + period as f64 {
        let c = center.round() as isize;
        for k in (c - reach).max(0)..(c + reach + 1).min(len as isize) {
            let d = k as f64 - center;
            out[k as usize] += (-d * d / (2.0 * width * width)).exp();
        }
        center += period as f64;
    }
    out
}

/// Generates one continuous recording and cuts it into segments.
///
/// `x [S, n_a, T]` abdominal, `t [S, n_t, T]` thorax, hidden `s [S, 1, T]` fetal train.
pub fn gen_synthetic_fecg(cfg: &FecgConfig, seed: u64) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cfg.n_t_samples * cfg.n_segments;
    let phase_m = rng.random_range(0.0..cfg.tau_m as f64);
    let phase_f = rng.random_range(0.0..cfg.tau_f as f64);
    let m = pulse_train(total, cfg.tau_m, phase_m, cfg.width_m);
    let g = pulse_train(total, cfg.tau_f, phase_f, cfg.width_f);
    let gain = |rng: &mut ChaCha8Rng, signed: bool| {
        let v = rng.random_range(0.5..1.5);
        if signed && rng.random_bool(0.5) {
            -v
        } else {
            v
        }
    };
    let gm: Vec<f64> = (0..cfg.n_a).map(|_| gain(&mut rng, true)).collect();
    let gf: Vec<f64> = (0..cfg.n_a).map(|_| gain(&mut rng, true)).collect();
    let gt: Vec<f64> = (0..cfg.n_t).map(|_| gain(&mut rng, false)).collect();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let len = cfg.n_t_samples;
    let mut x = vec![0.0; total * cfg.n_a];
    let mut t = vec![0.0; total * cfg.n_t];
    let mut s = vec![0.0; total];
    // Layout [segment, channel, time]; noise is drawn channel by channel per segment.
    for seg in 0..cfg.n_segments {
        for c in 0..cfg.n_a {
            for k in 0..len {
                let i = seg * len + k;
                x[(seg * cfg.n_a + c) * len + k] = gm[c] * m[i] + cfg.alpha * gf[c] * g[i] + noise.sample(&mut rng);
            }
        }
        for c in 0..cfg.n_t {
            for k in 0..len {
                let i = seg * len + k;
                t[(seg * cfg.n_t + c) * len + k] = gt[c] * m[i] + noise.sample(&mut rng);
            }
        }
        s[seg * len..(seg + 1) * len].copy_from_slice(&g[seg * len..(seg + 1) * len]);
    }

    let meta = DatasetMeta {
        generator: "fecg".into(),
        seed,
        params: serde_json::json!({ "fecg": cfg }),
        segment_len: Some(len),
        lags: Some(vec![
            SegmentLags {
                fetal: cfg.tau_f,
                maternal: cfg.tau_m,
            };
            cfg.n_segments
        ]),
    };
    PairedDataset::new(
        Tensor::new(vec![cfg.n_segments, cfg.n_a, len], x)?,
        Condition::Numeric(Tensor::new(vec![cfg.n_segments, cfg.n_t, len], t)?),
        Some(Tensor::new(vec![cfg.n_segments, 1, len], s)?),
        meta,
    )
}
