/// Strided matrix view: element `(i, j)` lives at `i * row + j * col`.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub row: usize,
    pub col: usize,
}

impl Layout {
    /// Row-major matrix with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn max_offset(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.row + (c - 1) * self.col
        }
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm rhs out of bounds");
    // SAFETY: all three operands were bounds-checked against their strides
    // above and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row as isize,
            la.col as isize,
            b.as_ptr(),
            lb.row as isize,
            lb.col as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
