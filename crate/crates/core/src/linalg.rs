//! Dense determinant by LU with partial pivoting.

/// Determinant of the row-major `n x n` matrix `a`.
pub fn det(mut a: Vec<f64>, n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut sign = 1.0;
    let mut acc = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs())).unwrap();
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            sign = -sign;
        }
        let p = a[col * n + col];
        acc *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
            }
        }
    }
    sign * acc
}

/// Central finite-difference Jacobian of `f: R^n -> R^n` at `x`, row-major.
pub fn fd_jacobian<F>(x: &[f64], h: f64, mut f: F) -> crate::error::Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> crate::error::Result<Vec<f64>>,
{
    let n = x.len();
    let mut jac = vec![0.0; n * n];
    let mut p = x.to_vec();
    for col in 0..n {
        p[col] = x[col] + h;
        let up = f(&p)?;
        p[col] = x[col] - h;
        let dn = f(&p)?;
        p[col] = x[col];
        if up.len() != n || dn.len() != n {
            return Err(crate::error::Error::invalid("finite-difference map must be square"));
        }
        for row in 0..n {
            jac[row * n + col] = (up[row] - dn[row]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_determinants() {
        assert_eq!(det(vec![2.0], 1), 2.0);
        assert!((det(vec![0.0, 1.0, 1.0, 0.0], 2) + 1.0).abs() < 1e-15);
        // Vandermonde on (1, 2, 3): (2-1)(3-1)(3-2) = 2.
        let v = vec![1.0, 1.0, 1.0, 1.0, 2.0, 4.0, 1.0, 3.0, 9.0];
        assert!((det(v, 3) - 2.0).abs() < 1e-12);
        assert_eq!(det(vec![1.0, 2.0, 2.0, 4.0], 2), 0.0);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let j = fd_jacobian(&[0.3, -0.2], 1e-4, |p| Ok(vec![2.0 * p[0] + p[1], p[0] - 3.0 * p[1]])).unwrap();
        assert!((det(j, 2) + 7.0).abs() < 1e-9);
    }
}
