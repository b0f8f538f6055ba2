//! Thin strided wrapper around `matrixmultiply::dgemm`.

/// A logical `rows x cols` matrix over a row-major buffer, optionally viewed
/// transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    /// `data` stored as `rows x cols`, used as is.
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too short");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// `data` stored as `rows x cols`, used as its `cols x rows` transpose.
    pub(crate) fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too short");
        Self {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }

    /// Stored `rows x cols`, transposed when `trans` is set.
    pub(crate) fn view(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        if trans {
            Self::transposed(data, rows, cols)
        } else {
            Self::new(data, rows, cols)
        }
    }
}

/// `c = a * b` (or `c += a * b` with `accumulate`), `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension mismatch");
    assert!(c.len() >= m * n, "gemm output buffer too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches: rows/cols of
    // each operand fit inside its slice under the given strides.
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
    fn transposed_views_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let expect = naive(&a, &b, 2, 3, 4);

        let mut c = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut c, false);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored transposed (3x2), b stored transposed (4x3)
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(
            MatRef::transposed(&at, 3, 2),
            MatRef::transposed(&bt, 4, 3),
            &mut c2,
            false,
        );
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut c2, true);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }
}
