//! Reference-channel adaptive interference cancellation (LMS and RLS).
//!
//! Each abdominal channel is the primary signal; the thorax channels are the
//! reference. The filter predicts the part of the primary explained by recent
//! reference samples and the residual is what remains.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Weight magnitude beyond which LMS is declared divergent.
pub const LMS_WEIGHT_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lms,
    Rls,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveFilterConfig {
    /// Taps per reference channel.
    pub taps: usize,
    /// LMS step size.
    pub mu: f64,
    /// RLS forgetting factor.
    pub lambda_forget: f64,
    /// RLS initialization: the inverse correlation starts at `I / delta`.
    pub delta: f64,
}

impl Default for AdaptiveFilterConfig {
    fn default() -> Self {
        Self {
            taps: 8,
            mu: 0.01,
            lambda_forget: 0.999,
            delta: 0.01,
        }
    }
}

impl AdaptiveFilterConfig {
    /// `mu = 0` is accepted so that a frozen filter can be expressed.
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 {
            return Err(Error::invalid("taps must be >= 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        if !(self.lambda_forget > 0.0 && self.lambda_forget <= 1.0) {
            return Err(Error::invalid(format!("lambda_forget must lie in (0, 1], got {}", self.lambda_forget)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be finite and > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub residual: Vec<f64>,
    /// Final weights, `taps` per reference channel, channel-major.
    pub weights: Vec<f64>,
}

fn check_signals(primary: &[f64], reference: &[Vec<f64>]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::invalid("at least one reference channel is required"));
    }
    if let Some(r) = reference.iter().find(|r| r.len() != primary.len()) {
        return Err(Error::invalid(format!(
            "reference length {} differs from primary length {}",
            r.len(),
            primary.len()
        )));
    }
    if reference.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid("reference is all zero"));
    }
    Ok(())
}

/// Tap window at step `k`: `r_c(k), r_c(k-1), ..`, zero before the start.
fn fill_window(u: &mut [f64], reference: &[Vec<f64>], taps: usize, k: usize) {
    for (c, r) in reference.iter().enumerate() {
        for j in 0..taps {
            u[c * taps + j] = if k >= j { r[k - j] } else { 0.0 };
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lms_cancel(primary: &[f64], reference: &[Vec<f64>], cfg: &AdaptiveFilterConfig) -> Result<FilterOutput> {
    cfg.validate()?;
    check_signals(primary, reference)?;
    let dim = cfg.taps * reference.len();
    let mut w = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    let mut residual = Vec::with_capacity(primary.len());
    for (k, &p) in primary.iter().enumerate() {
        fill_window(&mut u, reference, cfg.taps, k);
        let e = p - dot(&w, &u);
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi += cfg.mu * e * ui;
        }
        if !w.iter().all(|v| v.abs() <= LMS_WEIGHT_LIMIT) {
            return Err(Error::FilterDiverged(format!(
                "LMS weights exceeded {LMS_WEIGHT_LIMIT:e} at sample {k}; use a smaller mu than {}",
                cfg.mu
            )));
        }
        residual.push(e);
    }
    Ok(FilterOutput { residual, weights: w })
}

/// Exponentially weighted RLS; the residual is the a priori error.
pub fn rls_cancel(primary: &[f64], reference: &[Vec<f64>], cfg: &AdaptiveFilterConfig) -> Result<FilterOutput> {
    cfg.validate()?;
    check_signals(primary, reference)?;
    let dim = cfg.taps * reference.len();
    let lam = cfg.lambda_forget;
    let mut w = vec![0.0; dim];
    let mut p = vec![0.0; dim * dim];
    for i in 0..dim {
        p[i * dim + i] = 1.0 / cfg.delta;
    }
    let mut u = vec![0.0; dim];
    let mut pu = vec![0.0; dim];
    let mut residual = Vec::with_capacity(primary.len());
    for (k, &d) in primary.iter().enumerate() {
        fill_window(&mut u, reference, cfg.taps, k);
        for i in 0..dim {
            pu[i] = dot(&p[i * dim..(i + 1) * dim], &u);
        }
        let denom = lam + dot(&u, &pu);
        let e = d - dot(&w, &u);
        // P is symmetric, so u^T P = (P u)^T.
        for i in 0..dim {
            let gain = pu[i] / denom;
            w[i] += gain * e;
            for j in 0..dim {
                p[i * dim + j] = (p[i * dim + j] - gain * pu[j]) / lam;
            }
        }
        if !e.is_finite() || !w.iter().all(|v| v.is_finite()) || !p.iter().all(|v| v.is_finite()) {
            return Err(Error::FilterDiverged(format!("RLS state became non-finite at sample {k}")));
        }
        residual.push(e);
    }
    Ok(FilterOutput { residual, weights: w })
}

pub fn cancel(method: Method, primary: &[f64], reference: &[Vec<f64>], cfg: &AdaptiveFilterConfig) -> Result<FilterOutput> {
    match method {
        Method::Lms => lms_cancel(primary, reference, cfg),
        Method::Rls => rls_cancel(primary, reference, cfg),
    }
}

/// Cancels every abdominal channel of `x [S, n_a, T]` against all thorax
/// channels of `t [S, n_t, T]`.
///
/// Segments are treated as consecutive pieces of one recording, so the
/// filter state carries over from one segment to the next.
pub fn cancel_multichannel(x: &Tensor, t: &Tensor, method: Method, cfg: &AdaptiveFilterConfig) -> Result<Tensor> {
    let (xs, ts) = (x.shape(), t.shape());
    if xs.len() != 3 || ts.len() != 3 || xs[0] != ts[0] || xs[2] != ts[2] {
        return Err(Error::shape("cancel_multichannel", format!("x {xs:?} and t {ts:?}")));
    }
    let (n_s, n_a, n_t, len) = (xs[0], xs[1], ts[1], xs[2]);
    let channel = |data: &[f64], chans: usize, c: usize| -> Vec<f64> {
        (0..n_s)
            .flat_map(|s| data[(s * chans + c) * len..(s * chans + c + 1) * len].iter().copied())
            .collect()
    };
    let reference: Vec<Vec<f64>> = (0..n_t).map(|c| channel(t.data(), n_t, c)).collect();
    let mut out = vec![0.0; x.data().len()];
    for a in 0..n_a {
        let res = cancel(method, &channel(x.data(), n_a, a), &reference, cfg)?.residual;
        for s in 0..n_s {
            out[(s * n_a + a) * len..(s * n_a + a + 1) * len].copy_from_slice(&res[s * len..(s + 1) * len]);
        }
    }
    Tensor::new(xs.to_vec(), out)
}
