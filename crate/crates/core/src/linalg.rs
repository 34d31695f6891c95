//! Dense LU factorisation with partial pivoting, enough for the network Newton step.

use crate::scalar::Scalar;

/// Solves `a * x = b` in place. `a` is row-major `n x n` and is overwritten by
/// its LU factors; `b` is overwritten by the solution. Returns `false` when a
/// pivot is numerically zero.
pub fn lu_solve_in_place<T: Scalar>(a: &mut [T], b: &mut [T], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if !(best > T::zero()) || !best.is_finite() {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == T::zero() {
                continue;
            }
            a[row * n + col] = f;
            for k in col + 1..n {
                let u = a[col * n + k];
                a[row * n + k] -= f * u;
            }
            let bc = b[col];
            b[row] -= f * bc;
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * b[k];
        }
        b[row] = acc / a[row * n + row];
    }
    true
}
