use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// Storage of a matrix operand: `a` is either `rows × cols` row-major, or its
/// transpose stored row-major.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

fn view(data: &[f32], rows: usize, cols: usize, layout: Layout) -> ArrayView2<'_, f32> {
    match layout {
        Layout::Normal => ArrayView2::from_shape((rows, cols), data).unwrap(),
        // A transposed operand is a column-major view of the same buffer.
        Layout::Transposed => ArrayView2::from_shape((rows, cols).f(), data).unwrap(),
    }
}

/// `c = a · b + beta · c` with `a: m × k`, `b: k × n`, `c: m × n` (row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a = view(a, m, k, a_layout);
    let b = view(b, k, n, b_layout);
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}
