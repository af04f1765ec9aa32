/// `C = A * B + C` for strided row/column views, backed by `matrixmultiply`.
///
/// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. Each stride pair is
/// `(row_stride, col_stride)` in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, s: (usize, usize)| (rows - 1) * s.0 + (cols - 1) * s.1;
    assert!(last(m, k, sa) < a.len(), "gemm: lhs view out of bounds");
    assert!(last(k, n, sb) < b.len(), "gemm: rhs view out of bounds");
    assert!(last(m, n, sc) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
