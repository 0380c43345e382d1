//! Dense numeric kernels: row-major matrices, matmul variants, layer norm,
//! softmax, activations (with VJPs for the hand-written backward pass), a
//! Jacobi eigensolver, and seeded orthonormal bases.
//!
//! Everything is generic over [`Real`] so the same model code runs in f32
//! (training/inference) and f64 (gradient verification). Inner reduction
//! loops are strictly sequential in a fixed order; parallelism only splits
//! work across output rows, so results do not depend on thread count.

use crate::par;
use num_traits::Float;

/// Scalar type the model math runs in.
pub trait Real:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> T {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn mm_nn_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.rows, "mm_nn inner dims");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let k = a.cols;
    let n = b.cols;
    let a_data = &a.data;
    let b_data = &b.data;
    par::rows_for_each_mut(&mut c.data, n, |i, crow| {
        let arow = &a_data[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b_data[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

pub fn mm_nn<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    mm_nn_acc(a, b, &mut c);
    c
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`. Row-dot-row form.
pub fn mm_nt_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.cols, "mm_nt inner dims");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    let k = a.cols;
    let n = b.rows;
    let a_data = &a.data;
    let b_data = &b.data;
    par::rows_for_each_mut(&mut c.data, n, |i, crow| {
        let arow = &a_data[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b_data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    });
}

pub fn mm_nt<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.rows);
    mm_nt_acc(a, b, &mut c);
    c
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`. Outer-product form;
/// each output row accumulates over k in the same order in both modes.
pub fn mm_tn_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.rows, b.rows, "mm_tn inner dims");
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let k = a.rows;
    let m = a.cols;
    let n = b.cols;
    let a_data = &a.data;
    let b_data = &b.data;
    par::rows_for_each_mut(&mut c.data, n, |i, crow| {
        for l in 0..k {
            let av = a_data[l * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b_data[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

pub fn mm_tn<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.cols, b.cols);
    mm_tn_acc(a, b, &mut c);
    c
}

/// `y = x · w + b` with `x: n×in`, `w: in×out`, `b: out`.
pub fn linear<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &[T]) -> Mat<T> {
    assert_eq!(w.cols, b.len(), "linear bias length");
    let mut y = Mat::zeros(x.rows, w.cols);
    for i in 0..y.rows {
        y.row_mut(i).copy_from_slice(b);
    }
    mm_nn_acc(x, w, &mut y);
    y
}

/// Column sums of `m` (bias gradient).
pub fn col_sums<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols];
    for i in 0..m.rows {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-6;

/// Per-row layer norm without learned affine. Returns `(xhat, rstd)`;
/// `xhat` is the normalized output.
pub fn layernorm_fwd<T: Real>(x: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let d = T::from_f64(x.cols as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut rstds = vec![T::zero(); x.rows];
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / d;
        let rstd = (var + eps).sqrt().recip();
        rstds[i] = rstd;
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
    }
    (xhat, rstds)
}

/// VJP of [`layernorm_fwd`]: maps `d xhat` to `d x`.
pub fn layernorm_bwd<T: Real>(dxhat: &Mat<T>, xhat: &Mat<T>, rstds: &[T]) -> Mat<T> {
    let d = T::from_f64(dxhat.cols as f64);
    let mut dx = Mat::zeros(dxhat.rows, dxhat.cols);
    for i in 0..dxhat.rows {
        let dh = dxhat.row(i);
        let xh = xhat.row(i);
        let mut sum_dh = T::zero();
        let mut sum_dh_xh = T::zero();
        for (&a, &b) in dh.iter().zip(xh) {
            sum_dh += a;
            sum_dh_xh += a * b;
        }
        let mean_dh = sum_dh / d;
        let mean_dh_xh = sum_dh_xh / d;
        let rstd = rstds[i];
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(dh).zip(xh) {
            *o = rstd * (a - mean_dh - b * mean_dh_xh);
        }
    }
    dx
}

/// Row-wise softmax in place (max-subtracted).
pub fn softmax_rows<T: Real>(m: &mut Mat<T>) {
    let cols = m.cols;
    par::rows_for_each_mut(&mut m.data, cols, |_, row| {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
}

/// VJP of row-wise softmax: given probabilities `p` and upstream `dp`,
/// returns `ds` for the logits.
pub fn softmax_bwd_rows<T: Real>(dp: &Mat<T>, p: &Mat<T>) -> Mat<T> {
    let mut ds = Mat::zeros(dp.rows, dp.cols);
    for i in 0..dp.rows {
        let dpr = dp.row(i);
        let pr = p.row(i);
        let mut dot = T::zero();
        for (&a, &b) in dpr.iter().zip(pr) {
            dot += a * b;
        }
        for ((o, &a), &b) in ds.row_mut(i).iter_mut().zip(dpr).zip(pr) {
            *o = b * (a - dot);
        }
    }
    ds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = (T::one() + (-x).exp()).recip();
    s * (T::one() + x * (T::one() - s))
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues (ascending) and, when requested, the matching
/// orthonormal eigenvectors as matrix columns.
pub fn jacobi_eigh(a: &Mat<f64>, want_vectors: bool) -> (Vec<f64>, Option<Mat<f64>>) {
    assert_eq!(a.rows, a.cols, "jacobi_eigh needs a square matrix");
    let n = a.rows;
    let mut m = a.clone();
    let mut v = if want_vectors {
        Some(Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 }))
    } else {
        None
    };

    let frob: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (frob * 1e-14).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.at(k, p);
                    let akq = m.at(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.at(p, k);
                    let aqk = m.at(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                if let Some(vm) = v.as_mut() {
                    for k in 0..n {
                        let vkp = vm.at(k, p);
                        let vkq = vm.at(k, q);
                        vm.set(k, p, c * vkp - s * vkq);
                        vm.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(i, i).partial_cmp(&m.at(j, j)).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| m.at(i, i)).collect();
    let evecs = v.map(|vm| Mat::from_fn(n, n, |r, c| vm.at(r, order[c])));
    (evals, evecs)
}

/// Orthonormal columns from a seeded Gaussian matrix via twice-iterated
/// modified Gram-Schmidt. `gauss` is n×m with n ≥ m.
pub fn orthonormal_columns(gauss: &Mat<f64>) -> Mat<f64> {
    let n = gauss.rows;
    let m = gauss.cols;
    assert!(n >= m, "need at least as many rows as columns");
    let mut cols: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..n).map(|i| gauss.at(i, j)).collect())
        .collect();
    for j in 0..m {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                let ck = &head[k];
                for (x, &y) in tail[0].iter_mut().zip(ck) {
                    *x -= dot * y;
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "rank-deficient Gaussian draw");
        for x in cols[j].iter_mut() {
            *x /= norm;
        }
    }
    Mat::from_fn(n, m, |i, j| cols[j][i])
}
