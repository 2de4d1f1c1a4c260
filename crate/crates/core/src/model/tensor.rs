//! Row-major dense matrices over `f64`, backed by `matrixmultiply`.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_row_vector(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    /// Column sums accumulated into `out`.
    pub fn col_sums_into(&self, out: &mut [f64]) {
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    }
}

/// A strided view used to address column blocks (attention heads) in place.
#[derive(Clone, Copy)]
pub struct View {
    pub ptr_offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl View {
    pub fn whole(m: &Mat) -> Self {
        Self {
            ptr_offset: 0,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
        }
    }

    pub fn cols_of(m: &Mat, start: usize, width: usize) -> Self {
        Self {
            ptr_offset: start,
            rows: m.rows,
            cols: width,
            row_stride: m.cols,
        }
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(
    alpha: f64,
    a: &[f64],
    av: View,
    trans_a: bool,
    b: &[f64],
    bv: View,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    let (m, k) = if trans_a { (av.cols, av.rows) } else { (av.rows, av.cols) };
    let (kb, n) = if trans_b { (bv.cols, bv.rows) } else { (bv.rows, bv.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((cv.rows, cv.cols), (m, n), "output shape differs");
    let (rsa, csa) = if trans_a { (1, av.row_stride) } else { (av.row_stride, 1) };
    let (rsb, csb) = if trans_b { (1, bv.row_stride) } else { (bv.row_stride, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of every strided access, so the raw-pointer call stays in range.
    let extent = |v: &View| v.ptr_offset + (v.rows.max(1) - 1) * v.row_stride + v.cols;
    assert!(extent(&av) <= a.len() && extent(&bv) <= b.len() && extent(&cv) <= c.len());
    // SAFETY: the three extents were checked above and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.ptr_offset),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(bv.ptr_offset),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(cv.ptr_offset),
            cv.row_stride as isize,
            1,
        );
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` on whole matrices.
pub fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let cv = View::whole(c);
    gemm_view(
        alpha,
        &a.data,
        View::whole(a),
        trans_a,
        &b.data,
        View::whole(b),
        trans_b,
        beta,
        &mut c.data,
        cv,
    );
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
