//! Thin wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// Layout of an operand as stored in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. Buffers are row-major as stored; `Trans::Yes` means
/// the stored matrix is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: extents and strides above address exactly the asserted buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a[m x k] * b[k x n]`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, Trans::No, b, Trans::No, 0.0, &mut c);
    c
}

/// `exp` on a branch-free path so that loops over slices vectorize:
/// round-to-nearest range reduction by `ln 2`, a degree-12 Taylor
/// polynomial on `|r| <= ln 2 / 2` and the power of two assembled in the
/// exponent bits. Relative error stays near one ulp; inputs are clamped
/// to the normal range and NaN propagates.
#[inline(always)]
fn exp_kernel(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 709.0);
    let k = x * std::f64::consts::LOG2_E + SHIFT;
    let n = k - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let e = (k.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023)) << 52;
    p * f64::from_bits(e)
}

/// In-place logistic function over a slice.
pub fn sigmoid_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = 1.0 / (1.0 + exp_kernel(-*x));
    }
}

/// In-place hyperbolic tangent over a slice, as `2 sigmoid(2x) - 1`;
/// absolute error stays at the level of one ulp of 1.
pub fn tanh_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = 2.0 / (1.0 + exp_kernel(-2.0 * *x)) - 1.0;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_operands() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, Trans::No), (&at, Trans::Yes)] {
            for (bb, tb) in [(&b, Trans::No), (&bt, Trans::Yes)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn slice_kernels_track_std() {
        let xs: Vec<f64> = (-4000..=4000)
            .map(|i| i as f64 * 0.01)
            .chain([-800.0, 800.0, 1e-300, -1e-12])
            .collect();
        let mut s = xs.clone();
        let mut t = xs.clone();
        sigmoid_slice(&mut s);
        tanh_slice(&mut t);
        for ((x, s), t) in xs.iter().zip(&s).zip(&t) {
            let want = sigmoid(*x);
            assert!(
                (s - want).abs() <= 1e-15 * want + 1e-300,
                "sigmoid {x}: {s} vs {want}"
            );
            assert!(
                (t - x.tanh()).abs() <= 4e-16,
                "tanh {x}: {t} vs {}",
                x.tanh()
            );
        }
        let mut nan = [f64::NAN];
        sigmoid_slice(&mut nan);
        assert!(nan[0].is_nan());
        for x in [-700.0, -1.0, 0.0, 0.5, 1.0, 100.0, 700.0] {
            let e = exp_kernel(x);
            assert!((e - f64::exp(x)).abs() <= 1e-15 * f64::exp(x), "exp {x}");
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
