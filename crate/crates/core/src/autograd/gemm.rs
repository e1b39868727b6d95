//! Dense matrix products on row-major slices.
//!
//! The inner kernel is `matrixmultiply::dgemm`; rows of the output are split
//! into fixed chunks that are dispatched through [`crate::parallel`], so the
//! summation order per output element never depends on the thread count.

use crate::parallel;

const ROW_CHUNK: usize = 64;

#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Stored as given (row-major `rows x cols`).
    Normal,
    /// Stored row-major as `cols x rows`; used transposed.
    Transposed,
}

/// `c = a' * b' + beta * c` where `a'` is `m x k`, `b'` is `k x n`, and the
/// primes denote the optional transposes described by `la` / `lb`. `c` is
/// row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1isize),
        Layout::Transposed => (1isize, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1isize),
        Layout::Transposed => (1isize, k as isize),
    };
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    parallel::for_each_chunk_mut(c, ROW_CHUNK * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * ROW_CHUNK;
        let rows = c_chunk.len() / n;
        // SAFETY: the offsets stay within `a` (rows row0..row0+rows of an
        // m x k view) and `b` is read whole; `c_chunk` is exclusively ours.
        unsafe {
            let a_off = (a_ptr as *const f64).offset(row0 as isize * rsa);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_off,
                rsa,
                csa,
                b_ptr as *const f64,
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Strided read-only matrix view: element `(r, c)` is
/// `data[off + r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View<'_> {
    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// Single-threaded `c = a * b + beta * c` on strided views, with `a` of
/// shape `m x k`, `b` of `k x n` and `c` addressed like a [`View`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    a.check(m, k);
    b.check(k, n);
    View { data: c, off: c_off, rs: rsc, cs: csc }.check(m, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above for the full
    // extents dgemm touches; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn all_layouts_match_naive_product() {
        let (m, k, n) = (150, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![f64::NAN; m * n];
                gemm(m, k, n, aa, la, bb, lb, 0.0, &mut c);
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn strided_product_matches_naive() {
        let (m, k, n) = (6, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.25 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 5) as f64).collect();
        let want = naive(m, k, n, &a, &b);
        // `a` read transposed from its transpose, `c` written column-major
        // into a padded buffer.
        let at = transpose(m, k, &a);
        let mut c = vec![0.0; 2 + m * n];
        let av = View { data: &at, off: 0, rs: 1, cs: m };
        let bv = View { data: &b, off: 0, rs: n, cs: 1 };
        gemm_strided(m, k, n, av, bv, 0.0, &mut c, 2, 1, m);
        for i in 0..m {
            for j in 0..n {
                assert_eq!(c[2 + j * m + i], want[i * n + j]);
            }
        }
    }

    #[test]
    fn beta_one_accumulates() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [10.0, 20.0];
        gemm(2, 2, 1, &a, Layout::Normal, &b, Layout::Normal, 1.0, &mut c);
        assert_eq!(c, [13.0, 27.0]);
    }
}
