/// `c = op(a) * op(b) + beta * c` on row-major slices, where `op(a)` is
/// `rows x inner` and `op(b)` is `inner x cols`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    rows: usize,
    inner: usize,
    cols: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(c.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    if inner == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, rows) } else { (inner, 1) };
    let (rsb, csb) = if trans_b { (1, inner) } else { (cols, 1) };
    // SAFETY: strides describe exactly the extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major permutation copy: `out[idx] = src[perm-mapped idx]`.
pub(crate) fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(src[0]);
        return (out, out_shape);
    }
    // Odometer over the output index; the innermost axis is copied in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner_len {
            out.push(src[off]);
            off += inner_stride;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            counter[d] += 1;
            base += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}
