//! Bounds-checked strided matrix views over flat buffers and the one matrix
//! product everything else is built on.

use crate::scalar::Scalar;

/// Read-only view of a `rows × cols` matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Mutable view of a `rows × cols` matrix inside a flat buffer.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Option<usize> {
    if rows == 0 || cols == 0 {
        None
    } else {
        Some(offset + (rows - 1) * rs + (cols - 1) * cs)
    }
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major matrix.
    pub fn rows(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a dense row-major `rows × cols` matrix, i.e. a
    /// `cols × rows` view.
    pub fn rows_t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows: cols, cols: rows, rs: 1, cs: cols }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Columns `start..start + len` of this view.
    pub fn col_block(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column block out of range");
        Self { offset: self.offset + start * self.cs, cols: len, ..self }
    }

    /// Rows `start..start + len` of this view.
    pub fn row_block(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row block out of range");
        Self { offset: self.offset + start * self.rs, rows: len, ..self }
    }

    fn check(&self) {
        if let Some(last) = last_index(self.offset, self.rows, self.cols, self.rs, self.cs) {
            assert!(last < self.data.len(), "matrix view exceeds buffer");
        }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn rows(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn col_block(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column block out of range");
        Self { offset: self.offset + start * self.cs, cols: len, ..self }
    }

    fn check(&self) {
        if let Some(last) = last_index(self.offset, self.rows, self.cols, self.rs, self.cs) {
            assert!(last < self.data.len(), "matrix view exceeds buffer");
        }
    }
}

/// `c = alpha · a · b + beta · c`.
///
/// Panics on inconsistent shapes or views that leave their buffers; both are
/// programming errors inside the crate, never user input.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    c.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above against their buffers,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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
        )
    }
}

/// Dense row-major product `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::rows(a, m, k),
        MatRef::rows(b, k, n),
        T::zero(),
        MatMut::rows(&mut out, m, n),
    );
    out
}

/// Row-major transpose of a `rows × cols` matrix.
pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(a.len(), rows * cols);
    let mut out = Vec::with_capacity(a.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(a[i * cols + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let got = matmul(&a, &b, 3, 4, 5);
        let want = naive(&a, &b, 3, 4, 5);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views_and_blocks() {
        // a is 2×3, use aᵀ (3×2) times a 2×2 block of b.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 9.0, 0.0, 1.0, 9.0];
        let mut c = vec![0.0f64; 6];
        gemm(
            1.0,
            MatRef::rows_t(&a, 2, 3),
            MatRef::rows(&b, 2, 3).col_block(0, 2),
            0.0,
            MatMut::rows(&mut c, 3, 2),
        );
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn zero_inner_dimension_scales_output() {
        let mut c = vec![3.0f64; 4];
        gemm(1.0, MatRef::rows(&[], 2, 0), MatRef::rows(&[], 0, 2), 0.0, MatMut::rows(&mut c, 2, 2));
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "exceeds buffer")]
    fn out_of_bounds_view_panics() {
        let a = [1.0f64; 3];
        let b = [1.0f64; 4];
        let mut c = vec![0.0f64; 4];
        gemm(1.0, MatRef::rows(&a, 2, 2), MatRef::rows(&b, 2, 2), 0.0, MatMut::rows(&mut c, 2, 2));
    }
}
