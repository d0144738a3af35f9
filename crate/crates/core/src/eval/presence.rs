use serde::{Deserialize, Serialize};

use super::pca::pca;
use crate::autodiff::Tensor;
use crate::datagen::SegmentLags;
use crate::error::{Error, Result};

/// Below this mean maternal autocorrelation the ratio is not reported.
pub const MATERNAL_FLOOR: f64 = 1e-6;

/// Normalized one-sided autocorrelation `A(0..=max_lag)`.
///
/// The signal is centered on its full-length mean; lag `tau` is the inner
/// product of the overlapping parts divided by the geometric mean of their
/// energies, so `|A| <= 1` and a periodic signal scores 1 at its own period.
pub fn one_sided_autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if x.len() < 2 * max_lag || x.len() < 2 {
        return Err(Error::invalid(format!(
            "signal of length {} is too short for lag {max_lag}",
            x.len()
        )));
    }
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let energy: f64 = c.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::Degenerate("autocorrelation of a constant signal".into()));
    }
    // Running energies of the dropped head and tail avoid a quadratic pass.
    let (mut head, mut tail) = (0.0, 0.0);
    let mut out = Vec::with_capacity(max_lag + 1);
    for tau in 0..=max_lag {
        if tau > 0 {
            head += c[tau - 1] * c[tau - 1];
            tail += c[c.len() - tau] * c[c.len() - tau];
        }
        let denom = ((energy - tail).max(0.0) * (energy - head).max(0.0)).sqrt();
        let dot: f64 = c[..c.len() - tau].iter().zip(&c[tau..]).map(|(a, b)| a * b).sum();
        out.push(if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPresence {
    pub a_f: f64,
    pub a_m: f64,
}

/// Mean autocorrelation of the top principal component at fetal and maternal lags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresenceReport {
    pub a_f: f64,
    pub a_m: f64,
    /// `a_f / a_m`; absent when `a_m` is at or below the floor.
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_absent_reason: Option<String>,
    pub segments: Vec<SegmentPresence>,
    /// How lags were turned into sample offsets.
    pub lag_rule: String,
}

impl PresenceReport {
    /// The ratio for comparisons: the reported `r`, or `+inf` when the maternal
    /// lag shows no presence while the fetal lag does, or `0` when neither does.
    pub fn ratio_or_inf(&self) -> f64 {
        match self.r {
            Some(r) => r,
            None if self.a_f > MATERNAL_FLOOR => f64::INFINITY,
            None => 0.0,
        }
    }
}

/// Top principal component of one `[C, T]` segment (time steps are samples).
pub fn principal_signal(segment: &[f64], channels: usize, len: usize) -> Result<Vec<f64>> {
    if segment.len() != channels * len {
        return Err(Error::shape("principal_signal", format!("{} values for {channels}x{len}", segment.len())));
    }
    let mut rows = vec![0.0; len * channels];
    for c in 0..channels {
        for k in 0..len {
            rows[k * channels + c] = segment[c * len + k];
        }
    }
    Ok(pca(&rows, len, channels, 1)?.projections)
}

/// Presence ratio over segments `[S, C, T]` with per-segment lags.
pub fn presence_ratio(segments: &Tensor, lags: &[SegmentLags]) -> Result<PresenceReport> {
    let shape = segments.shape();
    if shape.len() != 3 {
        return Err(Error::shape("presence_ratio", format!("expected [S, C, T], got {shape:?}")));
    }
    let (n_s, ch, len) = (shape[0], shape[1], shape[2]);
    if lags.len() != n_s || n_s == 0 {
        return Err(Error::invalid(format!("{} lag pairs for {n_s} segments", lags.len())));
    }
    let mut per = Vec::with_capacity(n_s);
    for (seg, l) in segments.data().chunks(ch * len).zip(lags) {
        let max_lag = l.fetal.max(l.maternal);
        if l.fetal == 0 || l.maternal == 0 {
            return Err(Error::invalid("lags must be positive"));
        }
        let pc = principal_signal(seg, ch, len)?;
        let a = one_sided_autocorrelation(&pc, max_lag)?;
        per.push(SegmentPresence {
            a_f: a[l.fetal],
            a_m: a[l.maternal],
        });
    }
    let a_f = per.iter().map(|p| p.a_f).sum::<f64>() / n_s as f64;
    let a_m = per.iter().map(|p| p.a_m).sum::<f64>() / n_s as f64;
    let (r, reason) = if a_m > MATERNAL_FLOOR {
        (Some(a_f / a_m), None)
    } else {
        (
            None,
            Some(format!("mean maternal autocorrelation {a_m:.3e} is at or below the floor {MATERNAL_FLOOR:e}")),
        )
    };
    Ok(PresenceReport {
        a_f,
        a_m,
        r,
        r_absent_reason: reason,
        segments: per,
        lag_rule: "integer lags in samples (nearest integer)".into(),
    })
}
