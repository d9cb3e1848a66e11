//! Differentiable tensor operations.
//!
//! Every function here records a backward closure on its output when any
//! input requires a gradient. Broadcasting is limited to leading singleton
//! axes: an operand may be repeated as a whole block over the leading axes of
//! the other, nothing more.

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

fn grads1(g: Vec<f64>) -> Vec<Option<Vec<f64>>> {
    vec![Some(g)]
}

/// `c = alpha * op(a) * op(b)` into a zeroed or accumulating `c` (beta).
/// Row-major; transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths are checked above against the (m, k, n) layout the
    // strides describe, so every access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bc.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ac.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// 2-D transpose.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let &[r, c] = x.shape() else {
        return Err(Error::dim(format!("transpose needs a 2-D tensor, got {:?}", x.shape())));
    };
    let out = transpose_data(x.data(), r, c);
    Ok(Tensor::from_op(
        "transpose",
        out,
        vec![c, r],
        vec![x.clone()],
        Box::new(move |g, _| grads1(transpose_data(g, c, r))),
    ))
}

pub(crate) fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != x.numel() || shape.contains(&0) {
        return Err(Error::dim(format!("cannot reshape {:?} into {:?}", x.shape(), shape)));
    }
    Ok(Tensor::from_op(
        "reshape",
        x.data().to_vec(),
        shape.to_vec(),
        vec![x.clone()],
        Box::new(|g, _| grads1(g.to_vec())),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Output shape for two operands where at most one is repeated over the
/// other's leading axes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out.push(x.max(y));
    }
    // Each operand must equal a suffix of the output once its leading ones
    // are stripped, so that operand index == output index mod operand size.
    let suffix_ok = |p: &[usize]| {
        let first = p.iter().position(|&d| d != 1).unwrap_or(rank);
        p[first..] == out[first..]
    };
    (suffix_ok(&pa) && suffix_ok(&pb)).then_some(out)
}

fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

pub fn elementwise(a: &Tensor, b: &Tensor, kind: Elementwise) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::dim(format!(
            "cannot broadcast {:?} with {:?} (only leading singleton axes broadcast)",
            a.shape(),
            b.shape()
        ))
    })?;
    let n = numel_of(&shape);
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = (ad[i % na], bd[i % nb]);
            match kind {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                Elementwise::Mul => x * y,
            }
        })
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    let name = match kind {
        Elementwise::Add => "add",
        Elementwise::Sub => "sub",
        Elementwise::Mul => "mul",
    };
    Ok(Tensor::from_op(
        name,
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, need| {
            let ga = need[0].then(|| match kind {
                Elementwise::Add | Elementwise::Sub => reduce_to(g, na),
                Elementwise::Mul => {
                    let bd = bc.data();
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bd[i % nb]).collect();
                    reduce_to(&full, na)
                }
            });
            let gb = need[1].then(|| match kind {
                Elementwise::Add => reduce_to(g, nb),
                Elementwise::Sub => reduce_to(&g.iter().map(|v| -v).collect::<Vec<_>>(), nb),
                Elementwise::Mul => {
                    let ad = ac.data();
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * ad[i % na]).collect();
                    reduce_to(&full, nb)
                }
            });
            vec![ga, gb]
        }),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Add)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Sub)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Mul)
}

/// Multiply by a constant.
pub fn scale(x: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        "scale",
        x.data().iter().map(|v| v * s).collect(),
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _| grads1(g.iter().map(|v| v * s).collect())),
    )
}

pub fn sum(x: &Tensor) -> Tensor {
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![x.data().iter().sum()],
        vec![1],
        vec![x.clone()],
        Box::new(move |g, _| grads1(vec![g[0]; n])),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    scale(&sum(x), 1.0 / x.numel() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => {
            let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
            let xc = x.clone();
            Tensor::from_op(
                "relu",
                out,
                x.shape().to_vec(),
                vec![x.clone()],
                Box::new(move |g, _| {
                    grads1(
                        g.iter()
                            .zip(xc.data())
                            .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    )
                }),
            )
        }
        Activation::Sigmoid => {
            let out: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
            let y = out.clone();
            Tensor::from_op(
                "sigmoid",
                out,
                x.shape().to_vec(),
                vec![x.clone()],
                Box::new(move |g, _| grads1(g.iter().zip(&y).map(|(gi, s)| gi * s * (1.0 - s)).collect())),
            )
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    activation(x, Activation::Relu)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    activation(x, Activation::Sigmoid)
}

/// `(outer, len, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::dim(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (d[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        "softmax",
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            grads1(gx)
        }),
    ))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalize over the last axis (length `last_axis_size`), then apply
/// `gain * x_hat + bias` with `gain` and `bias` of that length.
pub fn layer_norm(x: &Tensor, last_axis_size: usize, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = last_axis_size;
    if x.shape().last() != Some(&n) {
        return Err(Error::dim(format!("layer_norm over {n} but input has shape {:?}", x.shape())));
    }
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::dim(format!(
            "layer_norm gain/bias must have {n} entries, got {:?} / {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.numel() / n;
    let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            let h = (row[j] - mu) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gd[j] + bd[j];
        }
    }
    let gain_c = gain.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, need| {
            let gd = gain_c.data();
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        m1 += d;
                        m2 += d * hr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] * (gr[j] * gd[j] - m1 - hr[j] * m2);
                    }
                }
                gx
            });
            let gg = need[1].then(|| {
                let mut gg = vec![0.0; n];
                for (i, (gi, h)) in g.iter().zip(&xhat).enumerate() {
                    gg[i % n] += gi * h;
                }
                gg
            });
            let gb = need[2].then(|| reduce_to(g, n));
            vec![gx, gg, gb]
        }),
    ))
}

/// Join tensors along `axis`; every other axis must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    if axis >= first.ndim() {
        return Err(Error::dim(format!("concat axis {axis} out of range for {:?}", first.shape())));
    }
    for p in parts {
        let same_rank = p.ndim() == first.ndim();
        let off_axis_match = same_rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !off_axis_match {
            return Err(Error::dim(format!(
                "concat along axis {axis}: {:?} does not match {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    Ok(Tensor::from_op(
        "concat",
        out,
        shape,
        parts.to_vec(),
        Box::new(move |g, need| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[offset..offset + l * inner]);
                    offset += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(need)
                .map(|(gp, &n)| n.then_some(gp))
                .collect()
        }),
    ))
}

/// `x[.., start..start+len, ..]` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(format!(
            "slice [{start}, {}) along axis {axis} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let n_in = x.numel();
    Ok(Tensor::from_op(
        "slice",
        out,
        shape,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            grads1(gx)
        }),
    ))
}

/// Mean binary cross-entropy on logits against a constant target tensor of
/// the same shape, in the stable `max(x,0) - x t + ln(1 + e^-|x|)` form.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "bce: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.numel() as f64;
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    let (lc, tc) = (logits.clone(), targets.clone());
    Ok(Tensor::from_op(
        "bce_with_logits",
        vec![total / n],
        vec![1],
        vec![logits.clone()],
        Box::new(move |g, _| {
            grads1(
                lc.data()
                    .iter()
                    .zip(tc.data())
                    .map(|(&x, &t)| g[0] * (sigmoid_scalar(x) - t) / n)
                    .collect(),
            )
        }),
    ))
}
