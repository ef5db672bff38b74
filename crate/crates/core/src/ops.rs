//! Primitive forward kernels.
//!
//! These are plain functions over [`Tensor`]s. The computation record in
//! [`crate::graph`] calls the same kernels, so recorded and unrecorded
//! evaluation produce bitwise-identical values.

use crate::tensor::{Result, Tensor, TensorError};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Strided read-only matrix view handed to the GEMM kernel.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    // SAFETY: every index reachable through the given dims and strides was
    // bounds-checked above, and `c` is an exclusively borrowed contiguous
    // buffer of exactly `a.rows * b.cols` elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn batched_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

/// Matrix product `a · b`, or `a · bᵀ` when `trans_b` is set.
///
/// Both operands are rank 2, or both are rank 3 with equal leading batch size,
/// in which case the product is taken per batch entry.
pub fn matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let op = if trans_b { "matmul_nt" } else { "matmul" };
    let (Some((ba, m, k)), Some((bb, r, c))) = (batched_dims(a), batched_dims(b)) else {
        return Err(mismatch(op, a, b));
    };
    let (kb, n) = if trans_b { (c, r) } else { (r, c) };
    if a.ndim() != b.ndim() || ba != bb || k != kb {
        return Err(mismatch(op, a, b));
    }
    let mut out = vec![0.0; ba * m * n];
    for bi in 0..ba {
        let av = MatView::row_major(&a.data()[bi * m * k..(bi + 1) * m * k], m, k);
        let braw = MatView::row_major(&b.data()[bi * r * c..(bi + 1) * r * c], r, c);
        let bv = if trans_b { braw.t() } else { braw };
        gemm(1.0, av, bv, 0.0, &mut out[bi * m * n..(bi + 1) * m * n]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [out_dim, in_dim] = *w.shape() else {
        return Err(mismatch("linear", x, w));
    };
    if x.last_dim() != in_dim {
        return Err(mismatch("linear", x, w));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(mismatch("linear", w, b));
        }
    }
    let m = x.rows();
    let mut out = vec![0.0; m * out_dim];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(out_dim) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        1.0,
        MatView::row_major(x.data(), m, in_dim),
        MatView::row_major(w.data(), out_dim, in_dim).t(),
        beta,
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_parts(shape, out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y).map_err(|_| mismatch("add", a, b))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y).map_err(|_| mismatch("mul", a, b))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Normalises each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(mismatch("layer_norm", x, gain));
    }
    if bias.shape() != [d] {
        return Err(mismatch("layer_norm", x, bias));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(d) {
        let (mean, rstd) = row_moments(row);
        for ((&v, &g), &b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((v - mean) * rstd * g + b);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Row mean and reciprocal standard deviation (population variance + eps).
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Gathers rows of `table` (`[vocab, d]`); the result has shape `shape ++ [d]`.
pub fn embedding(table: &Tensor, ids: &[usize], shape: &[usize]) -> Result<Tensor> {
    let [vocab, d] = *table.shape() else {
        return Err(TensorError::Invalid {
            op: "embedding",
            msg: format!("table must be rank 2, got {:?}", table.shape()),
        });
    };
    if shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
        return Err(TensorError::Invalid {
            op: "embedding",
            msg: format!("{} ids cannot fill shape {shape:?}", ids.len()),
        });
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: id,
                size: vocab,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    Ok(Tensor::from_parts(out_shape, out))
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
///
/// `-inf` entries receive exactly zero probability; at least one finite entry
/// per slice is required. Slices containing NaN yield NaN.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout("softmax", x.shape(), axis)?;
    if len == 0 {
        return Err(TensorError::EmptyAxis("softmax"));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            if (0..len).any(|i| src[idx(i)].is_nan()) {
                // non-finite input (e.g. a diverged model): propagate rather than misreport
                (0..len).for_each(|i| out[idx(i)] = f64::NAN);
                continue;
            }
            let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: "every entry along the axis is masked".into(),
                });
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (src[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Scales each leading-axis slice `x[i, ...]` by `gate[i]` (or all of `x` by a
/// one-element gate).
pub fn gate(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let lead = x.shape()[0];
    if gate.ndim() != 1 || (gate.len() != lead && gate.len() != 1) {
        return Err(mismatch("gate", x, gate));
    }
    let chunk = x.len() / lead;
    let mut out = x.data().to_vec();
    for (i, slice) in out.chunks_exact_mut(chunk).enumerate() {
        let g = if gate.len() == 1 {
            gate.data()[0]
        } else {
            gate.data()[i]
        };
        slice.iter_mut().for_each(|v| *v *= g);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Selects rows (over the last axis) of `x`, returning `[rows.len(), d]`.
pub fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.last_dim();
    let n = x.rows();
    if rows.is_empty() {
        return Err(TensorError::Invalid {
            op: "gather_rows",
            msg: "no rows requested".into(),
        });
    }
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: r,
                size: n,
            });
        }
        out.extend_from_slice(x.row(r));
    }
    Ok(Tensor::from_parts(vec![rows.len(), d], out))
}

fn check_ce_args(logits: &Tensor, targets: &[usize], weights_len: usize) -> Result<usize> {
    let classes = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows || weights_len != rows {
        return Err(TensorError::Invalid {
            op: "cross_entropy",
            msg: format!(
                "{rows} logit rows but {} targets and {weights_len} weights",
                targets.len()
            ),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: t,
            size: classes,
        });
    }
    Ok(classes)
}

/// Per-row negative log-likelihood `logsumexp(row) - row[target]`.
pub(crate) fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])`.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<f64> {
    let classes = check_ce_args(logits, targets, weights.len())?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .zip(targets)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((row, &t), &w)| w * row_nll(row, t))
        .sum())
}

/// Weights that turn the weighted loss into a mean over unpadded positions.
pub fn mean_weights(pad_mask: &[bool]) -> Result<Vec<f64>> {
    let live = pad_mask.iter().filter(|&&p| !p).count();
    if live == 0 {
        return Err(TensorError::AllPadded);
    }
    let w = 1.0 / live as f64;
    Ok(pad_mask.iter().map(|&p| if p { 0.0 } else { w }).collect())
}

/// Mean negative log-likelihood over positions where `pad_mask` is false.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], pad_mask: &[bool]) -> Result<f64> {
    check_ce_args(logits, targets, pad_mask.len())?;
    weighted_cross_entropy(logits, targets, &mean_weights(pad_mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.25, 4.0, -1.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &x, false).unwrap(), x);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b, false).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
            let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
            let got = matmul(&a, &b, false).unwrap();
            assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_and_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let c = matmul(&a, &b, true).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|p| a.at(&[bi, i, p]) * b.at(&[bi, j, p])).sum();
                    assert!((c.at(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b, false).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let got = linear(&x, &w, Some(&b)).unwrap();
            let wt: Vec<f64> = (0..4)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| w.at(&[j, i]))
                .collect();
            let wt = Tensor::new(vec![4, 3], wt).unwrap();
            let mut want = naive_matmul(&x, &wt).into_vec();
            for row in want.chunks_exact_mut(3) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            let want = Tensor::new(vec![6, 3], want).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&Tensor::vector(&[0.0, 0.7, 1.4]), 0).unwrap();
        let b = softmax(&Tensor::vector(&[100.0, 100.7, 101.4]), 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    // Oracle digits are kept verbatim from mpmath.
    #[allow(clippy::excessive_precision)]
    fn softmax_matches_extended_precision() {
        // exp(k) / (e + e^2 + e^3) for k = 1, 2, 3, evaluated with mpmath at 50 digits.
        let want = [0.090030573170380462, 0.24472847105479764, 0.66524095577482190];
        let got = softmax(&Tensor::vector(&[1.0, 2.0, 3.0]), 0).unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((s.at(&[0, j]) + s.at(&[1, j]) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(softmax(&x, 2), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let s = softmax(&Tensor::vector(&[1.0, f64::NEG_INFINITY, 1.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.0, 0.5]);
        assert!(softmax(&Tensor::vector(&[f64::NEG_INFINITY; 2]), 0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(&[4, 7]);
        let loss = cross_entropy(&logits, &[0, 3, 6, 2], &[false; 4]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_peaked_goes_to_zero() {
        let mut prev = f64::INFINITY;
        for peak in [1.0, 10.0, 100.0, 700.0] {
            let logits = Tensor::new(vec![1, 3], vec![0.0, peak, 0.0]).unwrap();
            let loss = cross_entropy(&logits, &[1], &[false]).unwrap();
            assert!(loss <= prev);
            prev = loss;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn cross_entropy_hand_computed() {
        let rows = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let targets = [2usize, 0];
        let logits = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let manual: f64 = rows
            .iter()
            .zip(targets)
            .map(|(r, t)| -(r[t].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 2.0;
        let got = cross_entropy(&logits, &targets, &[false, false]).unwrap();
        assert!((got - manual).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_ignores_padding() {
        let logits = Tensor::from_rows(&[vec![0.0, 5.0], vec![9.0, -9.0]]).unwrap();
        let a = cross_entropy(&logits, &[1, 1], &[false, true]).unwrap();
        let b = cross_entropy(&logits.reshape(&[2, 2]).unwrap(), &[1, 0], &[false, true]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            cross_entropy(&logits, &[1, 1], &[true, true]).unwrap_err(),
            TensorError::AllPadded
        );
        assert!(matches!(
            cross_entropy(&logits, &[2, 0], &[false, false]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[2, 5], 3.25);
        let y = layer_norm(&x, &Tensor::ones(&[5]), &Tensor::zeros(&[5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps() {
        assert_eq!(relu(&Tensor::vector(&[-1.0, 2.0])).data(), &[0.0, 2.0]);
    }

    #[test]
    fn embedding_and_gate() {
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let e = embedding(&table, &[2, 0, 1, 2], &[2, 2]).unwrap();
        assert_eq!(e.shape(), &[2, 2, 2]);
        assert_eq!(e.data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(embedding(&table, &[3], &[1]).is_err());
        let g = gate(&e, &Tensor::vector(&[0.0, 2.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0, 6.0, 8.0, 10.0, 12.0]);
    }
}
