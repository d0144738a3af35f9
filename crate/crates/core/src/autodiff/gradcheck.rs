use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates a scalar graph builder on fresh leaves holding `params`.
fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone(), requires_grad))
        .collect();
    let root = f(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(Error::Graph("gradient check needs a scalar-valued function".into()));
    }
    Ok((g, vars, root))
}

/// Maximum relative error between analytic and central-difference gradients.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let (g, vars, root) = evaluate(&f, params, true)?;
    let (g2, _, root2) = evaluate(&f, params, false)?;
    if g.value(root).data()[0].to_bits() != g2.value(root2).data()[0].to_bits() {
        return Err(Error::invalid("function is not deterministic across probe evaluations"));
    }
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, p);
        for i in 0..p.numel() {
            let base = p.data()[i];
            probe[pi].data_mut()[i] = base + h;
            let (gp, _, rp) = evaluate(&f, &probe, false)?;
            probe[pi].data_mut()[i] = base - h;
            let (gm, _, rm) = evaluate(&f, &probe, false)?;
            probe[pi].data_mut()[i] = base;
            let numeric = (gp.value(rp).data()[0] - gm.value(rm).data()[0]) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
