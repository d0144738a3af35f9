//! Forward values and backward rules of every primitive.

use super::graph::{BatchNormMode, Primitive, Saved, BATCHNORM_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

type Forward = (Tensor, Option<Saved>);

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Whether `b` broadcasts against `a` (suffix shape or single value).
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    if b.numel() == 1 {
        return true;
    }
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn binary_forward(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcastable(a, b) {
        return Err(Error::shape(op, format!("{:?} and {:?}", a.shape(), b.shape())));
    }
    let nb = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % nb]))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Sums a broadcast-shaped gradient back onto the shape of `b`.
fn reduce_to(b: &Tensor, full: impl Iterator<Item = f64>) -> Tensor {
    let nb = b.numel();
    let mut out = vec![0.0; nb];
    for (i, v) in full.enumerate() {
        out[i % nb] += v;
    }
    Tensor::from_parts(b.shape().to_vec(), out)
}

fn unary_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_axis(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {:?}", a.shape()))),
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        (sa, sb) => Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv_dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize, usize)> {
    let (&[b, cin, t], &[cout, cin2, k]) = (x.shape(), w.shape()) else {
        return Err(Error::shape(
            "conv1d",
            format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
        ));
    };
    if cin != cin2 {
        return Err(Error::shape(
            "conv1d",
            format!("input has {cin} channels, kernel expects {cin2}"),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::shape("conv1d", format!("kernel length {k} must be odd")));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv1d",
                format!("bias {:?} for {cout} output channels", bias.shape()),
            ));
        }
    }
    Ok((b, cin, t, cout, k))
}

/// Valid output range `[lo, hi)` for kernel offset `shift` on an axis of length `t`.
fn shifted_range(shift: isize, t: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

fn conv1d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (bsz, cin, t, cout, k) = conv_dims(x, w, bias)?;
    let pad = (k / 2) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; bsz * cout * t];
    for b in 0..bsz {
        for o in 0..cout {
            let row = &mut out[(b * cout + o) * t..(b * cout + o + 1) * t];
            for c in 0..cin {
                let xrow = &xd[(b * cin + c) * t..(b * cin + c + 1) * t];
                for j in 0..k {
                    let wv = wd[(o * cin + c) * k + j];
                    let shift = j as isize - pad;
                    let (lo, hi) = shifted_range(shift, t);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (r, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *r += wv * xv;
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[o];
                for r in row.iter_mut() {
                    *r += bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![bsz, cout, t], out))
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (bsz, cin, t, cout, k) = conv_dims(x, w, bias)?;
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
    let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
    for b in 0..bsz {
        for o in 0..cout {
            let grow = &gd[(b * cout + o) * t..(b * cout + o + 1) * t];
            for c in 0..cin {
                let xoff = (b * cin + c) * t;
                for j in 0..k {
                    let widx = (o * cin + c) * k + j;
                    let shift = j as isize - pad;
                    let (lo, hi) = shifted_range(shift, t);
                    if lo >= hi {
                        continue;
                    }
                    let s_lo = (lo as isize + shift) as usize;
                    let s_hi = (hi as isize + shift) as usize;
                    if let Some(gx) = gx.as_mut() {
                        let wv = wd[widx];
                        for (dst, &g) in gx[xoff + s_lo..xoff + s_hi].iter_mut().zip(&grow[lo..hi]) {
                            *dst += wv * g;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let mut acc = 0.0;
                        for (&xv, &g) in xd[xoff + s_lo..xoff + s_hi].iter().zip(&grow[lo..hi]) {
                            acc += xv * g;
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    let mut out = vec![
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ];
    if let Some(bias) = bias {
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; cout];
            for b in 0..bsz {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gd[(b * cout + o) * t..(b * cout + o + 1) * t].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(bias.shape().to_vec(), gb)
        });
        out.push(gb);
    }
    Ok(out)
}

/// `(batch, channels, inner)` view of a batchnorm input.
fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, inner) = match x.shape() {
        &[b, c] => (b, c, 1),
        &[b, c, t] => (b, c, t),
        s => return Err(Error::shape("batchnorm1d", format!("input {s:?} must be [B,C] or [B,C,T]"))),
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm1d",
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok((b, c, inner))
}

fn batchnorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: &BatchNormMode) -> Result<Forward> {
    let (bsz, ch, inner) = bn_dims(x, gamma, beta)?;
    let xd = x.data();
    let idx = |b: usize, c: usize, t: usize| (b * ch + c) * inner + t;
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let n = (bsz * inner) as f64;
            if bsz * inner < 2 {
                return Err(Error::shape("batchnorm1d", "training mode needs at least 2 values per channel"));
            }
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..bsz {
                    for t in 0..inner {
                        s += xd[idx(b, c, t)];
                    }
                }
                let m = s / n;
                let mut v = 0.0;
                for b in 0..bsz {
                    for t in 0..inner {
                        let d = xd[idx(b, c, t)] - m;
                        v += d * d;
                    }
                }
                mean[c] = m;
                var[c] = v / n;
            }
            (mean, var)
        }
        BatchNormMode::Eval {
            running_mean,
            running_var,
        } => {
            if running_mean.shape() != [ch] || running_var.shape() != [ch] {
                return Err(Error::shape("batchnorm1d", "running statistics do not match channels"));
            }
            (running_mean.data().to_vec(), running_var.data().to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    let mut normalized = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..bsz {
        for c in 0..ch {
            for t in 0..inner {
                let i = idx(b, c, t);
                let h = (xd[i] - mean[c]) * inv_std[c];
                normalized[i] = h;
                out[i] = gamma.data()[c] * h + beta.data()[c];
            }
        }
    }
    let saved = Saved::BatchNorm {
        normalized: Tensor::from_parts(x.shape().to_vec(), normalized),
        inv_std,
        mean: Tensor::from_parts(vec![ch], mean),
        var: Tensor::from_parts(vec![ch], var),
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(saved)))
}

fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: &BatchNormMode,
    saved: Option<&Saved>,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (bsz, ch, inner) = bn_dims(x, gamma, beta)?;
    let Some(Saved::BatchNorm {
        normalized, inv_std, ..
    }) = saved
    else {
        return Err(Error::Graph("batchnorm1d backward without saved statistics".into()));
    };
    let idx = |b: usize, c: usize, t: usize| (b * ch + c) * inner + t;
    let (gd, hd) = (grad.data(), normalized.data());
    let n = (bsz * inner) as f64;
    let mut ggamma = vec![0.0; ch];
    let mut gbeta = vec![0.0; ch];
    for c in 0..ch {
        for b in 0..bsz {
            for t in 0..inner {
                let i = idx(b, c, t);
                ggamma[c] += gd[i] * hd[i];
                gbeta[c] += gd[i];
            }
        }
    }
    let gx = needs[0].then(|| {
        let mut gx = vec![0.0; gd.len()];
        for c in 0..ch {
            let g = gamma.data()[c];
            match mode {
                BatchNormMode::Train => {
                    // dL/dh = g * dL/dy; sums over the channel are g*gbeta and g*ggamma.
                    let sum_gh = g * gbeta[c];
                    let sum_gh_h = g * ggamma[c];
                    for b in 0..bsz {
                        for t in 0..inner {
                            let i = idx(b, c, t);
                            let gh = g * gd[i];
                            gx[i] = inv_std[c] / n * (n * gh - sum_gh - hd[i] * sum_gh_h);
                        }
                    }
                }
                BatchNormMode::Eval { .. } => {
                    for b in 0..bsz {
                        for t in 0..inner {
                            let i = idx(b, c, t);
                            gx[i] = g * gd[i] * inv_std[c];
                        }
                    }
                }
            }
        }
        Tensor::from_parts(x.shape().to_vec(), gx)
    });
    Ok(vec![
        gx,
        needs[1].then(|| Tensor::from_parts(vec![ch], ggamma)),
        needs[2].then(|| Tensor::from_parts(vec![ch], gbeta)),
    ])
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    for t in inputs {
        let ok = t.ndim() == nd
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", first.shape(), t.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, data))
}

fn slice_geometry(op: &'static str, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<(usize, usize, usize)> {
    if axis >= a.ndim() || start + len > a.shape()[axis] {
        return Err(Error::shape(
            op,
            format!("slice axis {axis} [{start}, {}) of {:?}", start + len, a.shape()),
        ));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    Ok((outer, a.shape()[axis], inner))
}

fn softmax_rows(a: &Tensor, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.numel()];
    for (row, dst) in a.data().chunks(n).zip(out.chunks_mut(n)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    out
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Forward> {
    let name = prim.name();
    let plain = |t: Tensor| Ok((t, None));
    match prim {
        Primitive::MatMul => {
            arity(name, inputs, 2)?;
            let (m, k, n) = matmul_dims(inputs[0], inputs[1])?;
            plain(Tensor::from_parts(
                vec![m, n],
                matmul(inputs[0].data(), inputs[1].data(), m, k, n),
            ))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            arity(name, inputs, 2)?;
            let f: fn(f64, f64) -> f64 = match prim {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                Primitive::Mul => |a, b| a * b,
                _ => |a, b| a / b,
            };
            plain(binary_forward(name, inputs[0], inputs[1], f)?)
        }
        Primitive::Scale(c) => {
            arity(name, inputs, 1)?;
            plain(unary_map(inputs[0], |x| c * x))
        }
        Primitive::Offset(c) => {
            arity(name, inputs, 1)?;
            plain(unary_map(inputs[0], |x| x + c))
        }
        Primitive::Sum | Primitive::Mean => {
            arity(name, inputs, 1)?;
            let s: f64 = inputs[0].data().iter().sum();
            let v = if matches!(prim, Primitive::Mean) {
                if inputs[0].numel() == 0 {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                s / inputs[0].numel() as f64
            } else {
                s
            };
            plain(Tensor::scalar(v))
        }
        Primitive::Abs => unary(name, inputs, f64::abs),
        Primitive::Square => unary(name, inputs, |x| x * x),
        Primitive::Sqrt => unary(name, inputs, f64::sqrt),
        Primitive::Log => unary(name, inputs, f64::ln),
        Primitive::Exp => unary(name, inputs, f64::exp),
        Primitive::Tanh => unary(name, inputs, f64::tanh),
        Primitive::Relu => unary(name, inputs, |x| x.max(0.0)),
        Primitive::LeakyRelu { slope } => unary(name, inputs, |x| if x > 0.0 { x } else { slope * x }),
        Primitive::Softplus => unary(name, inputs, softplus),
        Primitive::Sigmoid => unary(name, inputs, sigmoid),
        Primitive::Softmax | Primitive::LogSoftmax => {
            arity(name, inputs, 1)?;
            let n = last_axis(name, inputs[0])?;
            let mut sm = softmax_rows(inputs[0], n);
            if matches!(prim, Primitive::LogSoftmax) {
                for (row, src) in sm.chunks_mut(n).zip(inputs[0].data().chunks(n)) {
                    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + src.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    for (d, &x) in row.iter_mut().zip(src) {
                        *d = x - lse;
                    }
                }
            }
            plain(Tensor::from_parts(inputs[0].shape().to_vec(), sm))
        }
        Primitive::Concat { axis } => plain(concat_forward(inputs, *axis)?),
        Primitive::Slice { axis, start, len } => {
            arity(name, inputs, 1)?;
            let a = inputs[0];
            let (outer, alen, inner) = slice_geometry(name, a, *axis, *start, *len)?;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            plain(Tensor::from_parts(shape, data))
        }
        Primitive::Reshape { shape } => {
            arity(name, inputs, 1)?;
            plain(inputs[0].reshape(shape)?)
        }
        Primitive::Conv1d => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(Error::shape(name, "expects input, kernel and optional bias"));
            }
            plain(conv1d_forward(inputs[0], inputs[1], inputs.get(2).copied())?)
        }
        Primitive::BatchNorm1d(mode) => {
            arity(name, inputs, 3)?;
            batchnorm_forward(inputs[0], inputs[1], inputs[2], mode)
        }
        Primitive::FrobeniusNorm => {
            arity(name, inputs, 1)?;
            let s: f64 = inputs[0].data().iter().map(|x| x * x).sum();
            plain(Tensor::scalar(s.sqrt()))
        }
        Primitive::Custom(op) => plain(op.forward(inputs)?),
    }
}

fn unary(name: &'static str, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<Forward> {
    arity(name, inputs, 1)?;
    Ok((unary_map(inputs[0], f), None))
}

pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: Option<&Saved>,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let one = |t: Tensor| Ok(vec![Some(t)]);
    // Elementwise unary rule in terms of (input, output).
    let local = |f: &dyn Fn(f64, f64) -> f64| {
        let d = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * f(x, y))
            .collect();
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))])
    };
    match prim {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = matmul_dims(a, b)?;
            let (ad, bd, gd) = (a.data(), b.data(), grad.data());
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let row = &mut gb[p * n..(p + 1) * n];
                        for (o, &g) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *o += av * g;
                        }
                    }
                }
                Tensor::from_parts(vec![k, n], gb)
            });
            Ok(vec![ga, gb])
        }
        Primitive::Add | Primitive::Sub => {
            let b = inputs[1];
            let sign = if matches!(prim, Primitive::Add) { 1.0 } else { -1.0 };
            let ga = needs[0].then(|| grad.clone());
            let gb = needs[1].then(|| reduce_to(b, grad.data().iter().map(|g| sign * g)));
            Ok(vec![ga, gb])
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let nb = b.numel();
            let bd = b.data();
            let ga = needs[0].then(|| {
                Tensor::from_parts(
                    a.shape().to_vec(),
                    grad.data().iter().enumerate().map(|(i, g)| g * bd[i % nb]).collect(),
                )
            });
            let gb = needs[1].then(|| reduce_to(b, grad.data().iter().zip(a.data()).map(|(g, x)| g * x)));
            Ok(vec![ga, gb])
        }
        Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let nb = b.numel();
            let bd = b.data();
            let ga = needs[0].then(|| {
                Tensor::from_parts(
                    a.shape().to_vec(),
                    grad.data().iter().enumerate().map(|(i, g)| g / bd[i % nb]).collect(),
                )
            });
            let gb = needs[1].then(|| {
                reduce_to(
                    b,
                    grad.data()
                        .iter()
                        .zip(a.data())
                        .enumerate()
                        .map(|(i, (g, x))| -g * x / (bd[i % nb] * bd[i % nb])),
                )
            });
            Ok(vec![ga, gb])
        }
        Primitive::Scale(c) => one(grad.map(|g| c * g)),
        Primitive::Offset(_) => one(grad.clone()),
        Primitive::Sum => one(Tensor::full(inputs[0].shape(), grad.data()[0])),
        Primitive::Mean => one(Tensor::full(
            inputs[0].shape(),
            grad.data()[0] / inputs[0].numel() as f64,
        )),
        Primitive::Abs => local(&|x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Primitive::Square => local(&|x, _| 2.0 * x),
        Primitive::Sqrt => local(&|_, y| 0.5 / y),
        Primitive::Log => local(&|x, _| 1.0 / x),
        Primitive::Exp => local(&|_, y| y),
        Primitive::Tanh => local(&|_, y| 1.0 - y * y),
        Primitive::Relu => local(&|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Primitive::LeakyRelu { slope } => local(&|x, _| if x > 0.0 { 1.0 } else { *slope }),
        Primitive::Softplus => local(&|x, _| sigmoid(x)),
        Primitive::Sigmoid => local(&|_, y| y * (1.0 - y)),
        Primitive::Softmax => {
            let n = last_axis("softmax", inputs[0])?;
            let mut d = vec![0.0; grad.numel()];
            for ((dst, y), g) in d.chunks_mut(n).zip(output.data().chunks(n)).zip(grad.data().chunks(n)) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                    *o = yv * (gv - dot);
                }
            }
            one(Tensor::from_parts(inputs[0].shape().to_vec(), d))
        }
        Primitive::LogSoftmax => {
            let n = last_axis("log_softmax", inputs[0])?;
            let mut d = vec![0.0; grad.numel()];
            for ((dst, y), g) in d.chunks_mut(n).zip(output.data().chunks(n)).zip(grad.data().chunks(n)) {
                let gs: f64 = g.iter().sum();
                for ((o, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                    *o = gv - yv.exp() * gs;
                }
            }
            one(Tensor::from_parts(inputs[0].shape().to_vec(), d))
        }
        Primitive::Concat { axis } => {
            let first = inputs[0];
            let outer: usize = first.shape()[..*axis].iter().product();
            let inner: usize = first.shape()[axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let gd = grad.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (t, need) in inputs.iter().zip(needs) {
                let chunk = t.shape()[*axis] * inner;
                if *need {
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        d.extend_from_slice(&gd[base..base + chunk]);
                    }
                    out.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
                } else {
                    out.push(None);
                }
                offset += chunk;
            }
            Ok(out)
        }
        Primitive::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, alen, inner) = slice_geometry("slice", a, *axis, *start, *len)?;
            let mut d = vec![0.0; a.numel()];
            let gd = grad.data();
            for o in 0..outer {
                let dst = (o * alen + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            one(Tensor::from_parts(a.shape().to_vec(), d))
        }
        Primitive::Reshape { .. } => one(Tensor::from_parts(inputs[0].shape().to_vec(), grad.data().to_vec())),
        Primitive::Conv1d => conv1d_backward(inputs[0], inputs[1], inputs.get(2).copied(), grad, needs),
        Primitive::BatchNorm1d(mode) => {
            batchnorm_backward(inputs[0], inputs[1], inputs[2], mode, saved, grad, needs)
        }
        Primitive::FrobeniusNorm => {
            let norm = output.data()[0];
            let g = grad.data()[0];
            if norm == 0.0 {
                return one(Tensor::zeros(inputs[0].shape()));
            }
            one(inputs[0].map(|x| g * x / norm))
        }
        Primitive::Custom(op) => {
            let gs = op.backward(inputs, output, grad)?;
            if gs.len() != inputs.len() {
                return Err(Error::Graph(format!(
                    "custom op `{}` returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    inputs.len()
                )));
            }
            for (g, x) in gs.iter().zip(inputs) {
                if g.shape() != x.shape() {
                    return Err(Error::shape(op.name(), "gradient shape differs from input"));
                }
            }
            Ok(gs.into_iter().map(Some).collect())
        }
    }
}
