//! Small dense solves used by the mel pseudo-inverse and regression probes.

use crate::error::{Error, Result};
use crate::Scalar;

/// In-place Cholesky factorization of a symmetric positive-definite `n×n`
/// row-major matrix; the lower triangle receives `L`.
fn cholesky<S: Scalar>(a: &mut [S], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= S::zero() {
            return Err(Error::Validation("matrix is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `A X = B` for SPD `A` (`n×n`) and `B` (`n×m`), both row-major.
pub(crate) fn solve_spd<S: Scalar>(a: &[S], n: usize, b: &[S], m: usize) -> Result<Vec<S>> {
    let mut l = a.to_vec();
    cholesky(&mut l, n)?;
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    Ok(x)
}
