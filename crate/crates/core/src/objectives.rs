//! Reconstruction and independence losses.
//!
//! Every independence term is written from the discriminator's point of view:
//! the discriminator minimizes `Ind`, the autoencoder minimizes
//! `recon - lambda * Ind` and so pushes `Ind` up.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Variance and norm floor below which a batch is rejected as degenerate.
pub const FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    L1,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndKind {
    DomainConfusion,
    Regression,
    Contrastive,
    ScaleInvariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub recon: ReconKind,
    pub ind: IndKind,
    pub lambda: f64,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    Ok(())
}

pub fn recon_l1(g: &mut Graph, xhat: Var, x: Var) -> Result<Var> {
    same_shape(g, "recon_l1", xhat, x)?;
    let d = g.sub(xhat, x)?;
    let d = g.abs(d)?;
    g.mean(d)
}

pub fn recon_mse(g: &mut Graph, xhat: Var, x: Var) -> Result<Var> {
    same_shape(g, "recon_mse", xhat, x)?;
    let d = g.sub(xhat, x)?;
    let d = g.square(d)?;
    g.mean(d)
}

pub fn recon(g: &mut Graph, kind: ReconKind, xhat: Var, x: Var) -> Result<Var> {
    match kind {
        ReconKind::L1 => recon_l1(g, xhat, x),
        ReconKind::Mse => recon_mse(g, xhat, x),
    }
}

/// Mean cross-entropy of `softmax(logits)` against class labels; `logits` is `[B, K]`.
pub fn ind_domain_confusion(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "domain_confusion",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut onehot = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new(shape, onehot)?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

fn as_columns(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    match shape.len() {
        1 => g.reshape(v, &[shape[0], 1]),
        2 => Ok(v),
        _ => Err(Error::shape("squared_correlation", format!("expected [B] or [B, d], got {shape:?}"))),
    }
}

fn column_variances(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / n as f64;
            (0..n).map(|i| (t.data()[i * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// Batch Pearson correlation squared between `a` and `b` (`[B]` or `[B, d]`).
///
/// For `d > 1` the result is the mean of the per-coordinate values.
pub fn squared_correlation(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let a = as_columns(g, a)?;
    let b = as_columns(g, b)?;
    same_shape(g, "squared_correlation", a, b)?;
    let (n, d) = (g.value(a).shape()[0], g.value(a).shape()[1]);
    if n < 2 {
        return Err(Error::Degenerate("correlation needs at least two samples".into()));
    }
    for (which, v) in [("a", a), ("b", b)] {
        if let Some(j) = column_variances(g.value(v)).iter().position(|&s| s <= FLOOR) {
            return Err(Error::Degenerate(format!(
                "variance of {which}[:, {j}] is below {FLOOR:e}"
            )));
        }
    }
    let ones = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let center = |g: &mut Graph, v: Var| -> Result<Var> {
        let mu = g.matmul(ones, v)?;
        let mu = g.reshape(mu, &[d])?;
        g.sub(v, mu)
    };
    let ac = center(g, a)?;
    let bc = center(g, b)?;
    let col_sum = |g: &mut Graph, v: Var| -> Result<Var> { g.matmul(ones, v) };
    let ab = g.mul(ac, bc)?;
    let cov = col_sum(g, ab)?;
    let aa = g.square(ac)?;
    let va = col_sum(g, aa)?;
    let bb = g.square(bc)?;
    let vb = col_sum(g, bb)?;
    let num = g.square(cov)?;
    let den = g.mul(va, vb)?;
    let r2 = g.div(num, den)?;
    g.mean(r2)
}

pub fn ind_regression(g: &mut Graph, disc_out: Var, t: Var) -> Result<Var> {
    let r2 = squared_correlation(g, disc_out, t)?;
    g.scale(r2, -1.0)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
pub fn ind_contrastive(g: &mut Graph, logits: Var, labels: &[bool]) -> Result<Var> {
    let n = g.value(logits).numel();
    if n != labels.len() {
        return Err(Error::shape(
            "contrastive",
            format!("{n} logits for {} labels", labels.len()),
        ));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Degenerate("contrastive batch holds a single tuple class".into()));
    }
    // BCE(z, y) = softplus(z) - y z.
    let shape = g.value(logits).shape().to_vec();
    let y = g.constant(Tensor::new(shape, labels.iter().map(|&l| l as u8 as f64).collect())?);
    let sp = g.softplus(logits)?;
    let yz = g.mul(y, logits)?;
    let bce = g.sub(sp, yz)?;
    g.mean(bce)
}

/// A permutation of `0..n` with no fixed points (`n >= 2`), uniform over derangements.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "derangement needs n >= 2");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// `‖ |x| / ‖x‖_F - |y| / ‖y‖_F ‖_F` over the whole tensors.
pub fn ind_scale_invariant(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "scale_invariant", x, y)?;
    let mut parts = [x, y];
    for (which, v) in parts.iter_mut().zip(["x", "y"]).map(|(v, w)| (w, v)) {
        let norm = g.value(*v).data().iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm <= FLOOR {
            return Err(Error::Degenerate(format!("norm of {which} is below {FLOOR:e}")));
        }
        let n = g.frobenius_norm(*v)?;
        let a = g.abs(*v)?;
        *v = g.div(a, n)?;
    }
    let d = g.sub(parts[0], parts[1])?;
    g.frobenius_norm(d)
}

/// Mean of [`ind_scale_invariant`] over the leading batch axis.
pub fn ind_scale_invariant_batched(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "scale_invariant", x, y)?;
    let b = g.value(x).shape()[0];
    let mut total = None;
    for i in 0..b {
        let xi = g.slice(x, 0, i, 1)?;
        let yi = g.slice(y, 0, i, 1)?;
        let term = ind_scale_invariant(g, xi, yi)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Degenerate("empty batch".into()))?;
    g.scale(total, 1.0 / b as f64)
}

pub fn loss_ae(g: &mut Graph, recon: Var, ind: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let scaled = g.scale(ind, lambda)?;
    g.sub(recon, scaled)
}

pub fn loss_disc(ind: Var) -> Var {
    ind
}
