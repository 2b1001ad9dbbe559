//! Dense inner loops. Each kernel is compiled twice: once for the baseline
//! target and once with AVX2 enabled, picked at runtime. Both builds perform
//! the same floating-point operations in the same order, so results do not
//! depend on which one runs.

macro_rules! dispatched {
    ($(#[$doc:meta])* $name:ident, $avx:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        #[inline(always)]
        fn generic($($arg: $ty),*) $(-> $ret)? $body

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx($($arg: $ty),*) $(-> $ret)? {
            generic($($arg),*)
        }

        $(#[$doc])*
        pub fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2, checked just above.
                    return unsafe { $avx($($arg),*) };
                }
            }
            generic($($arg),*)
        }
    };
}

pub mod mm {
    dispatched!(
        /// `out (n x m) += a (n x k) · b (k x m)`
        matmul, matmul_avx2, (a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
            // Four output rows at a time share each pass over a row of `b`.
            let full = n / 4 * 4;
            for (blk, rows) in out[..full * m].chunks_exact_mut(4 * m).enumerate() {
                let i = blk * 4;
                let (o0, rest) = rows.split_at_mut(m);
                let (o1, rest) = rest.split_at_mut(m);
                let (o2, o3) = rest.split_at_mut(m);
                for p in 0..k {
                    let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                    let brow = &b[p * m..(p + 1) * m];
                    for j in 0..m {
                        let bv = brow[j];
                        o0[j] += a0 * bv;
                        o1[j] += a1 * bv;
                        o2[j] += a2 * bv;
                        o3[j] += a3 * bv;
                    }
                }
            }
            for i in full..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = a[i * k + p];
                    for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                        *o += av * bv;
                    }
                }
            }
        }
    );
}

pub mod mmt {
    dispatched!(
        /// `out (n x m) = a (n x k) · b (m x k)ᵀ`
        matmul_t, matmul_t_avx2, (a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..m {
                    out[i * m + j] = super::dot_body(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
    );
}

pub mod tmm {
    dispatched!(
        /// `out (n x m) += a (k x n)ᵀ · b (k x m)`
        t_matmul, t_matmul_avx2, (a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
            // Four rows of `b` per pass over `out`; each element still sums in
            // row order.
            let full = k / 4 * 4;
            for p in (0..full).step_by(4) {
                let (b0, b1, b2, b3) = (
                    &b[p * m..(p + 1) * m],
                    &b[(p + 1) * m..(p + 2) * m],
                    &b[(p + 2) * m..(p + 3) * m],
                    &b[(p + 3) * m..(p + 4) * m],
                );
                for i in 0..n {
                    let (a0, a1, a2, a3) = (a[p * n + i], a[(p + 1) * n + i], a[(p + 2) * n + i], a[(p + 3) * n + i]);
                    for (j, o) in out[i * m..(i + 1) * m].iter_mut().enumerate() {
                        let mut v = *o;
                        v += a0 * b0[j];
                        v += a1 * b1[j];
                        v += a2 * b2[j];
                        v += a3 * b3[j];
                        *o = v;
                    }
                }
            }
            for p in full..k {
                let brow = &b[p * m..(p + 1) * m];
                for i in 0..n {
                    let av = a[p * n + i];
                    for (o, bv) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    );
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub use mm::matmul;
pub use mmt::matmul_t;
pub use tmm::t_matmul;
