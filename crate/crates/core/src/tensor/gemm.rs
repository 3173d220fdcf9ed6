/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout {
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c = a·b + beta·c` for an (m×k)·(k×n) product written row-major into `c`.
///
/// Single-threaded; the accumulation order for each output depends only on
/// the operand extents, so results are bitwise reproducible.
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
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * la.row_stride + (k - 1) * la.col_stride);
    assert!(b.len() > (k - 1) * lb.row_stride + (n - 1) * lb.col_stride);
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
