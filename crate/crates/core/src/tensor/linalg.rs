/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    /// `rows × cols` row-major.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    /// Transpose of a row-major matrix whose stored row length is `cols`.
    pub fn tr(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// `c ← a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm: lhs too small");
    assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
