/// `c = a · b + beta · c` for row-major matrices, where `a` is `m × k` (or
/// its transpose is stored when `a_t`), `b` is `k × n` (likewise `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm: buffer too small");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the bounds were asserted above and the strides describe
    // exactly the m×k, k×n and m×n views of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::gemm;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let at = [1.0, 3.0, 2.0, 4.0];
        gemm(2, 2, 2, &at, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let bt = [5.0, 7.0, 6.0, 8.0];
        gemm(2, 2, 2, &a, false, &bt, true, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
