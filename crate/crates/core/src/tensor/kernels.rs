//! Forward kernels over plain slices.
//!
//! Accumulation order is fixed (ascending inner index) so that any two
//! callers computing the same row get identical bits.

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_at<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Adds `b` to every row of `a` (in place).
pub fn add_row_inplace<T: Scalar>(a: &mut [T], b: &[T]) {
    for row in a.chunks_mut(b.len()) {
        for (x, &y) in row.iter_mut().zip(b) {
            *x = *x + y;
        }
    }
}

/// Row-wise softmax; masked-out entries (`mask[i] == false`) get exactly 0.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (r, (xrow, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        softmax_row(xrow, mrow, orow);
    }
    out
}

fn softmax_row<T: Scalar>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let masked = |j: usize| mask.is_some_and(|m| !m[j]);
    let pre = |j: usize| if masked(j) { T::MASK_FILL } else { x[j] };
    let mut max = T::neg_infinity();
    for j in 0..x.len() {
        max = max.max(pre(j));
    }
    let mut sum = T::zero();
    for (j, o) in out.iter_mut().enumerate() {
        let e = (pre(j) - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Per-row layer normalisation. Returns `(y, mean, rstd)`.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len().checked_div(cols).unwrap_or(0);
    let n = T::of(cols as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut s = T::zero();
        for &v in row {
            s = s + v;
        }
        let mean = s / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        let rstd = T::one() / (var / n + eps).sqrt();
        for j in 0..cols {
            y[r * cols + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// `ln softmax(x)[t]` under an optional mask, via log-sum-exp.
pub fn log_softmax_at<T: Scalar>(x: &[T], mask: Option<&[bool]>, t: usize) -> T {
    let masked = |j: usize| mask.is_some_and(|m| !m[j]);
    let pre = |j: usize| if masked(j) { T::MASK_FILL } else { x[j] };
    let mut max = T::neg_infinity();
    for j in 0..x.len() {
        max = max.max(pre(j));
    }
    let mut sum = T::zero();
    for j in 0..x.len() {
        sum = sum + (pre(j) - max).exp();
    }
    pre(t) - max - sum.ln()
}

const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + T::of(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Index of the largest entry among allowed ones; ties go to the lowest index.
pub fn masked_argmax<T: Scalar>(x: &[T], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, (&v, &ok)) in x.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let ab = matmul(&a, 2, 3, &b, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_bt(&a, 2, 3, &bt, 4), ab);
        let at = transpose(&a, 2, 3);
        let ab2 = matmul_at(&at, 3, 2, &b, 4);
        for (x, y) in ab.iter().zip(&ab2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_masked() {
        assert_eq!(softmax_rows(&[0.0f64, 0.0], 2, None), vec![0.5, 0.5]);
        let p = softmax_rows(&[5.0f64, 5.0, 5.0], 3, Some(&[true, false, true]));
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
        let p = softmax_rows(&[5.0f32, 5.0, 5.0], 3, Some(&[true, false, true]));
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn f32_mask_fill_underflows_to_zero() {
        let p = softmax_rows(&[80.0f32, -80.0, 0.0], 3, Some(&[false, true, true]));
        assert_eq!(p[0], 0.0);
        assert!((p[1] + p[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(masked_argmax(&[1.0f64, 3.0, 3.0], &[true, true, true]), Some(1));
        assert_eq!(masked_argmax(&[9.0f64, 3.0, 3.0], &[false, true, true]), Some(1));
        assert_eq!(masked_argmax(&[9.0f64], &[false]), None);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, _, _) = layer_norm_rows(&x, 4, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
