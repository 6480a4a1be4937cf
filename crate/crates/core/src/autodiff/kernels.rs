//! Forward kernels shared by recording, replay and the numeric adjoints.

use super::Mat;

/// `op(a) · op(b)` where `op` optionally transposes.
pub(crate) fn matmul(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { b.shape() };
    debug_assert_eq!(k, k2);
    let mut out = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    // SAFETY: strides describe in-bounds views of the row-major buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Row-wise matrix product: every row of `a` holds an `a_shape` matrix and
/// every row of `b` a `b_shape` matrix; row `i` of the result is
/// `op(a_i) · op(b_i)` flattened row-major.
pub(crate) fn batch_matmul(
    a: &Mat,
    a_shape: (usize, usize),
    ta: bool,
    b: &Mat,
    b_shape: (usize, usize),
    tb: bool,
) -> Mat {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let (_, n) = if tb { (b_shape.1, b_shape.0) } else { b_shape };
    let rows = a.rows();
    let mut out = Mat::zeros(rows, m * n);
    let (sa_r, sa_c) = if ta { (1, a_shape.1) } else { (a_shape.1, 1) };
    let (sb_r, sb_c) = if tb { (1, b_shape.1) } else { (b_shape.1, 1) };
    let a_data = a.data();
    let b_data = b.data();
    let a_w = a.cols();
    let b_w = b.cols();
    let out_data = out.data_mut();
    for r in 0..rows {
        let ar = &a_data[r * a_w..(r + 1) * a_w];
        let br = &b_data[r * b_w..(r + 1) * b_w];
        let orow = &mut out_data[r * m * n..(r + 1) * m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ar[i * sa_r + kk * sa_c];
                if av == 0.0 {
                    continue;
                }
                let o = &mut orow[i * n..(i + 1) * n];
                if sb_c == 1 {
                    let bs = &br[kk * sb_r..kk * sb_r + n];
                    for (ov, bv) in o.iter_mut().zip(bs) {
                        *ov += av * bv;
                    }
                } else {
                    for (j, ov) in o.iter_mut().enumerate() {
                        *ov += av * br[kk * sb_r + j * sb_c];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn concat_cols(parts: &[&Mat]) -> Mat {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Mat::new(rows, cols, data)
}

pub(crate) fn slice_cols(x: &Mat, start: usize, len: usize) -> Mat {
    let mut data = Vec::with_capacity(x.rows() * len);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row_slice(r)[start..start + len]);
    }
    Mat::new(x.rows(), len, data)
}

pub(crate) fn embed_cols(x: &Mat, start: usize, total: usize) -> Mat {
    let mut out = Mat::zeros(x.rows(), total);
    let w = x.cols();
    for r in 0..x.rows() {
        out.data_mut()[r * total + start..r * total + start + w].copy_from_slice(x.row_slice(r));
    }
    out
}

pub(crate) fn gather_rows(x: &Mat, index: &[usize]) -> Mat {
    let mut data = Vec::with_capacity(index.len() * x.cols());
    for &i in index {
        data.extend_from_slice(x.row_slice(i));
    }
    Mat::new(index.len(), x.cols(), data)
}

pub(crate) fn scatter_add_rows(x: &Mat, index: &[usize], rows: usize) -> Mat {
    let c = x.cols();
    let mut out = Mat::zeros(rows, c);
    for (k, &i) in index.iter().enumerate() {
        let src = x.row_slice(k);
        let dst = &mut out.data_mut()[i * c..(i + 1) * c];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    out
}

pub(crate) fn sum_rows(x: &Mat) -> Mat {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
            *o += v;
        }
    }
    Mat::row(out)
}

pub(crate) fn sum_cols(x: &Mat) -> Mat {
    Mat::column((0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect())
}

pub(crate) fn broadcast_rows(x: &Mat, rows: usize) -> Mat {
    let mut data = Vec::with_capacity(rows * x.cols());
    for _ in 0..rows {
        data.extend_from_slice(x.data());
    }
    Mat::new(rows, x.cols(), data)
}

pub(crate) fn broadcast_cols(x: &Mat, cols: usize) -> Mat {
    let mut data = Vec::with_capacity(x.rows() * cols);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, cols));
    }
    Mat::new(x.rows(), cols, data)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise standardisation: `(x - mean) / sqrt(var + eps)`.
pub(crate) fn layer_norm(x: &Mat, eps: f64) -> Mat {
    let n = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        let c = x.cols();
        for (o, v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
    }
    out
}

pub(crate) fn layer_norm_rstd(x: &Mat, eps: f64) -> Vec<f64> {
    let n = x.cols() as f64;
    (0..x.rows())
        .map(|r| {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            1.0 / (var + eps).sqrt()
        })
        .collect()
}
