/// Strided general matrix multiply, `c = a·b` or `c += a·b`.
///
/// `a` is `m×k` addressed as `a[i*rs_a + p*cs_a]`, likewise for `b` (`k×n`).
/// `c` is dense row-major `m×n`. Single-threaded with a fixed reduction
/// order, so results are bitwise reproducible.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rs_a, cs_a): (usize, usize),
    b: &[f64],
    (rs_b, cs_b): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rs_a + (k - 1) * cs_a < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rs_b + (n - 1) * cs_b < b.len(), "gemm: rhs out of bounds");
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by dgemm is bounds-checked above; the
    // output is a distinct mutable slice of at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rs_a as isize,
            cs_a as isize,
            b.as_ptr(),
            rs_b as isize,
            cs_b as isize,
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

    #[test]
    fn matches_naive_triple_loop_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, (k, 1), &b, (n, 1), &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a stored transposed (k×m) and read through strides
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, (1, m), &b, (n, 1), &mut c2, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
