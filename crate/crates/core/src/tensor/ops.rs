//! Forward kernels. Every function here is pure; the autodiff graph calls
//! into them and owns the matching backward rules.

use super::{axis_split, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn ensure_finite(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    if inputs.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op}: axis {axis} out of range"),
        });
    }
    Ok(())
}

/// `c = a·b + beta·c` where `a` is `m×k` (stored `k×m` when `trans_a`) and
/// `b` is `k×n` (stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides address
    // exactly the m×k, k×n and m×n blocks of the three buffers.
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(mismatch("matmul", &a.shape, &b.shape));
    }
    ensure_finite("matmul", &[a, b])?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x·wᵀ + b` over the last axis of `x`; `w` is `out×in`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let in_dim = *x.shape.last().unwrap();
    if w.ndim() != 2 || w.shape[1] != in_dim {
        return Err(mismatch("linear", &x.shape, &w.shape));
    }
    let out_dim = w.shape[0];
    if let Some(b) = b {
        if b.shape != [out_dim] {
            return Err(mismatch("linear(bias)", &w.shape, &b.shape));
        }
        ensure_finite("linear", &[x, w, b])?;
    } else {
        ensure_finite("linear", &[x, w])?;
    }
    let rows = x.numel() / in_dim;
    let mut out = match b {
        Some(b) => b.data.repeat(rows),
        None => vec![0.0; rows * out_dim],
    };
    gemm(rows, in_dim, out_dim, &x.data, false, &w.data, true, &mut out, 1.0);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_parts(shape, out))
}

/// Batched matmul over identical leading axes: `[.., m, k]·[.., k, n]`,
/// or `[.., m, k]·[.., n, k]ᵀ` when `trans_b`.
pub fn bmm(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ra, rb) = (a.ndim(), b.ndim());
    if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(mismatch("bmm", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (kb, n) = if trans_b {
        (b.shape[rb - 1], b.shape[rb - 2])
    } else {
        (b.shape[rb - 2], b.shape[rb - 1])
    };
    if k != kb {
        return Err(mismatch("bmm", &a.shape, &b.shape));
    }
    ensure_finite("bmm", &[a, b])?;
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data[i * m * k..(i + 1) * m * k],
            false,
            &b.data[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

/// Result shape of a suffix broadcast, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    long.ends_with(short).then(|| long.to_vec())
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| mismatch(op, &a.shape, &b.shape))?;
    ensure_finite(op, &[a, b])?;
    let n: usize = shape.iter().product();
    let (la, lb) = (a.numel(), b.numel());
    let data = (0..n).map(|i| f(a.data[i % la], b.data[i % lb])).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Elementwise sum; one operand may broadcast over the other's leading axes.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

/// Elementwise product with the same broadcasting rule as [`add`].
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    ensure_finite("scale", &[a])?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().map(|v| v * c).collect(),
    ))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
        return Err(mismatch("reshape", &a.shape, shape));
    }
    Ok(Tensor::from_parts(shape.to_vec(), a.data.clone()))
}

/// Reorders axes so that output axis `i` is input axis `axes[i]`.
pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = a.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
        return Err(mismatch("permute", &a.shape, axes));
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * a.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = Vec::with_capacity(a.numel());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let inner_extent = *out_shape.last().unwrap();
    let inner_stride = *strides.last().unwrap();
    loop {
        for j in 0..inner_extent {
            out.push(a.data[offset + j * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::InvalidShape {
            shape: a.shape.clone(),
            reason: "transpose expects a matrix".into(),
        });
    }
    permute(a, &[1, 0])
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum", &a.shape, axis)?;
    ensure_finite("sum", &[a])?;
    let (outer, n, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &a.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let n = a.shape.get(axis).copied().unwrap_or(1) as f64;
    let s = sum_axis(a, axis)?;
    scale(&s, 1.0 / n)
}

pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", &a.shape, axis)?;
    ensure_finite("softmax", &[a])?;
    let (outer, n, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| a.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (a.data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

/// Normalizes to zero mean and unit variance along `axis`; also returns
/// the per-position reciprocal standard deviations.
pub(crate) fn layer_norm_with_stats(a: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    check_axis("layer_norm", &a.shape, axis)?;
    ensure_finite("layer_norm", &[a])?;
    let (outer, n, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; a.numel()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| a.data[at(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (a.data[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = r;
            for j in 0..n {
                out[at(j)] = (a.data[at(j)] - mean) * r;
            }
        }
    }
    Ok((Tensor::from_parts(a.shape.clone(), out), inv_std))
}

pub fn layer_norm(a: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(a, axis, eps).map(|(t, _)| t)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    ensure_finite("gelu", &[a])?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().map(|&x| gelu_scalar(x)).collect(),
    ))
}

pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors".into(),
    })?;
    check_axis("concat", &first.shape, axis)?;
    for t in inputs {
        let same_rank = t.ndim() == first.ndim();
        let same_rest = same_rank
            && t.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(mismatch("concat", &first.shape, &t.shape));
        }
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let total: usize = inputs.iter().map(|t| t.shape[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let n = t.shape[axis];
            out.extend_from_slice(&t.data[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Contiguous slice `start..start + len` along `axis`.
pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("narrow", &a.shape, axis)?;
    if len == 0 || start + len > a.shape[axis] {
        return Err(Error::InvalidShape {
            shape: a.shape.clone(),
            reason: format!("narrow {start}..{} on axis {axis}", start + len),
        });
    }
    let indices: Vec<usize> = (start..start + len).collect();
    gather_axis(a, axis, &indices)
}

/// Selects `indices` (in order) along `axis`.
pub fn gather_axis(a: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    check_axis("gather", &a.shape, axis)?;
    let (outer, n, inner) = axis_split(&a.shape, axis);
    if indices.is_empty() || indices.iter().any(|&i| i >= n) {
        return Err(Error::InvalidShape {
            shape: a.shape.clone(),
            reason: format!("gather indices out of range on axis {axis}"),
        });
    }
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &j in indices {
            out.extend_from_slice(&a.data[(o * n + j) * inner..(o * n + j + 1) * inner]);
        }
    }
    let mut shape = a.shape.clone();
    shape[axis] = indices.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss together with the softmax probabilities.
pub(crate) fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.shape[0] != labels.len() {
        return Err(mismatch("cross_entropy", &logits.shape, &[labels.len()]));
    }
    let classes = logits.shape[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let probs = softmax(logits, 1)?;
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits.data[row * classes..(row + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[label];
    }
    Ok((loss / labels.len() as f64, probs))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| Tensor::scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_mismatch_and_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn rejects_non_finite() {
        let a = t(&[2], &[1.0, f64::NAN]);
        assert!(matches!(gelu(&a), Err(Error::NonFinite(_))));
        assert!(matches!(softmax(&a, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_softmax() {
        let s = softmax(&Tensor::zeros(&[4]), 0).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_on_inner_axis() {
        let a = t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]);
        let s = softmax(&a, 0).unwrap();
        // columns sum to one
        assert!((s.data()[0] + s.data()[2] - 1.0).abs() < 1e-15);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
        assert!(s.data()[3] > s.data()[1]);
    }

    #[test]
    fn layer_norm_matches_hand_computation() {
        // mean 2, biased variance 2/3
        let y = layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), 0, LAYER_NORM_EPS).unwrap();
        let r = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [-r, 0.0, r];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_moments() {
        let a = Tensor::from_fn(&[3, 5], |i| ((i * 7919) % 13) as f64 - 4.0);
        let y = layer_norm(&a, 1, 0.0).unwrap();
        for row in y.data().chunks(5) {
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&a, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (i,j,k) of a lands at (k,i,j)
        assert_eq!(p.data()[3 * 6 + 3 + 2], a.data()[12 + 2 * 4 + 3]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, a);
        assert!(permute(&a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn transpose_matrix() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(transpose(&a).unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn suffix_broadcast() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = t(&[3], &[10., 20., 30.]);
        assert_eq!(add(&a, &b).unwrap().data(), &[10., 21., 32., 13., 24., 35.]);
        assert!(add(&a, &t(&[2], &[1., 1.])).is_err());
    }

    #[test]
    fn linear_and_bmm_agree_with_matmul() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let w = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.3).cos());
        let b = Tensor::from_fn(&[5], |i| i as f64);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let reference = add(&matmul(&x, &transpose(&w).unwrap()).unwrap(), &b).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-12);

        let xb = reshape(&x, &[1, 3, 4]).unwrap();
        let wb = reshape(&w, &[1, 5, 4]).unwrap();
        let z = bmm(&xb, &wb, true).unwrap();
        let zr = matmul(&x, &transpose(&w).unwrap()).unwrap();
        assert!(reshape(&z, &[3, 5]).unwrap().max_abs_diff(&zr) < 1e-12);
    }

    #[test]
    fn concat_and_narrow() {
        let a = Tensor::from_fn(&[2, 1, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(narrow(&c, 1, 0, 1).unwrap(), a);
        assert_eq!(narrow(&c, 1, 1, 2).unwrap(), b);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let l = cross_entropy(&Tensor::zeros(&[3, 7]), &[0, 3, 6]).unwrap();
        assert!((l.item() - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 7]), &[7]),
            Err(Error::LabelOutOfRange { label: 7, classes: 7 })
        ));
    }

    #[test]
    fn cross_entropy_matches_per_sample_enumeration() {
        let logits = t(
            &[3, 4],
            &[0.3, -1.2, 2.0, 0.7, -0.4, 0.1, 0.9, -2.2, 1.5, 1.4, -0.3, 0.0],
        );
        let labels = [2usize, 0, 1];
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * 4..r * 4 + 4];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expected += -(row[y].exp() / denom).ln();
        }
        expected /= 3.0;
        let got = cross_entropy(&logits, &labels).unwrap().item();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let mut prev = f64::INFINITY;
        for margin in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut logits = Tensor::zeros(&[1, 3]);
            logits.data_mut()[1] = margin;
            let wrong = cross_entropy(&logits, &[0]).unwrap().item();
            let right = cross_entropy(&logits, &[1]).unwrap().item();
            assert!(right < prev && right >= 0.0);
            assert!(wrong > margin - 1e-9);
            prev = right;
        }
    }
}
