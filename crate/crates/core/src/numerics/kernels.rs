//! Row-level kernels shared by the autodiff tape and the incremental
//! inference path. Keeping one implementation of each primitive is what makes
//! streaming decoding agree with the teacher-forced forward pass.

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10_000.0;

/// `c (+)= op(a) · op(b)` where `a` is `m×k` and `b` is `k×n` after the
/// optional transposes. Storage of `a`/`b` is row-major in their untransposed
/// shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided ranges described above.
    unsafe {
        matrixmultiply::sgemm(
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

/// Strided layout of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(offset: usize, rs: usize) -> View {
        View { offset, rs, cs: 1 }
    }

    pub fn t(self) -> View {
        View {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

/// `c = alpha·a·b + beta·c` on strided views; `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    beta: f32,
    c: &mut [f32],
    cv: View,
) {
    assert!(av.fits(m, k, a.len()) && bv.fits(k, n, b.len()) && cv.fits(m, n, c.len()));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three strided views were checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Writes the RMS-normalized row into `out` and returns `1/rms`.
pub fn rms_norm_row(x: &[f32], gain: &[f32], out: &mut [f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    // 0.5·(1 + tanh(u)) = σ(2u)
    x / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = 2.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp()) - 1.0;
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn rope_inv_freq(head_dim: usize) -> Vec<f32> {
    (0..head_dim / 2)
        .map(|i| ROPE_BASE.powf(-(2.0 * i as f32) / head_dim as f32))
        .collect()
}

/// Rotates each adjacent pair of every head by `pos · inv_freq`. With
/// `inverse` the rotation runs backwards, which is also the adjoint.
pub fn rope_row(row: &mut [f32], pos: usize, n_heads: usize, inv_freq: &[f32], inverse: bool) {
    let hd = row.len() / n_heads;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (i, &f) in inv_freq.iter().enumerate() {
        let (s, c) = (pos as f32 * f).sin_cos();
        let s = sign * s;
        for h in 0..n_heads {
            let j = h * hd + 2 * i;
            let (x0, x1) = (row[j], row[j + 1]);
            row[j] = x0 * c - x1 * s;
            row[j + 1] = x0 * s + x1 * c;
        }
    }
}

/// In-place max-subtracted softmax; returns log-sum-exp of the input.
pub fn softmax_in_place(v: &mut [f32]) -> f32 {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = 1.0 / s;
    for x in v.iter_mut() {
        *x *= inv;
    }
    m + s.ln()
}

/// Key range `[lo, hi]` visible from query `i` of a sequence of length `len`.
#[inline]
pub fn attention_span(i: usize, len: usize, causal: bool, window: usize) -> (usize, usize) {
    if causal {
        let lo = if window > 0 { (i + 1).saturating_sub(window) } else { 0 };
        (lo, i)
    } else if window > 0 {
        (i.saturating_sub(window - 1), (i + window - 1).min(len - 1))
    } else {
        (0, len - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn rope_inverse_round_trips() {
        let inv = rope_inv_freq(4);
        let mut row = vec![0.3, -1.2, 0.7, 2.0, 1.0, 0.0, -0.5, 0.25];
        let orig = row.clone();
        rope_row(&mut row, 17, 2, &inv, false);
        rope_row(&mut row, 17, 2, &inv, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn window_spans() {
        assert_eq!(attention_span(10, 20, true, 4), (7, 10));
        assert_eq!(attention_span(2, 20, true, 4), (0, 2));
        assert_eq!(attention_span(5, 20, true, 0), (0, 5));
        assert_eq!(attention_span(5, 8, false, 0), (0, 7));
    }
}
