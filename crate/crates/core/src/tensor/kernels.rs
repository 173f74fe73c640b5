// Low-level loops shared by the operator implementations.

use super::Scalar;

/// Read-only strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major contiguous `rows x cols` block starting at `offset`.
    pub fn dense(data: &'a [T], offset: usize, rows: usize, cols: usize) -> Self {
        MatRef { data, offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], offset: usize, rows: usize, cols: usize) -> Self {
        MatMut { data, offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn with_row_stride(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        MatMut { data, offset, rows, cols, rs, cs: 1 }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner product: c = beta * c.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let ix = c.offset + i * c.rs + j * c.cs;
                c.data[ix] = if beta == T::zero() { T::zero() } else { beta * c.data[ix] };
            }
        }
        return;
    }
    assert!(a.last() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.last() < b.data.len(), "gemm rhs view out of bounds");
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm output view out of bounds");
    // SAFETY: every view was bounds-checked above and strides are non-negative;
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Walks `shape` in row-major order, calling `f(linear, offset)` where
/// `offset = sum(index[d] * strides[d])`.
pub(crate) fn strided_walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    debug_assert_eq!(shape.len(), strides.len());
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut index = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut linear = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            f(linear, off);
            linear += 1;
            off += inner_stride;
        }
        // odometer over the outer axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            index[d] += 1;
            base += strides[d];
            if index[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            index[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_walk_transposes() {
        // walk a 2x3 output reading a 3x2 row-major input transposed
        let input = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let mut out = vec![0.0; 6];
        strided_walk(&[2, 3], &[1, 2], |lin, off| out[lin] = input[off]);
        assert_eq!(out, vec![0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn gemm_with_transposed_view() {
        let a = [1.0f64, 2.0, 3.0, 4.0]; // [[1,2],[3,4]]
        let b = [1.0f64, 0.0, 1.0, 1.0]; // [[1,0],[1,1]]
        let mut c = vec![0.0f64; 4];
        gemm(MatRef::dense(&a, 0, 2, 2).t(), MatRef::dense(&b, 0, 2, 2), 0.0, MatMut::dense(&mut c, 0, 2, 2));
        // a^T b = [[1,3],[2,4]] [[1,0],[1,1]]
        assert_eq!(c, vec![4.0, 3.0, 6.0, 4.0]);
    }
}
