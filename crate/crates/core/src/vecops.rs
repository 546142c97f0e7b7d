//! Small dense-vector helpers over `f64` slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm2(a).sqrt()
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `a * b - c * d` with one rounding error (Kahan's fma trick).
#[inline]
pub fn diff_of_products(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let cd = c * d;
    let err = (-c).mul_add(d, cd);
    let dop = a.mul_add(b, -cd);
    dop + err
}

/// An orthonormal basis of the tangent space of the unit sphere at `omega`.
pub fn tangent_basis(omega: &[f64]) -> Vec<Vec<f64>> {
    let d = omega.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    // Gram-Schmidt over the canonical vectors, skipping the one most aligned
    // with omega.
    let skip = (0..d)
        .max_by(|&a, &b| omega[a].abs().total_cmp(&omega[b].abs()))
        .unwrap_or(0);
    for k in (0..d).filter(|&k| k != skip) {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let p = dot(&e, omega);
        for (ei, oi) in e.iter_mut().zip(omega) {
            *ei -= p * oi;
        }
        for b in &basis {
            let q = dot(&e, b);
            for (ei, bi) in e.iter_mut().zip(b) {
                *ei -= q * bi;
            }
        }
        let n = norm(&e);
        e.iter_mut().for_each(|x| *x /= n);
        basis.push(e);
    }
    basis
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    // 2 pi^{d/2} / Gamma(d/2)
    let half = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half)
}

/// Volume of the unit ball in `R^n`.
pub fn ball_volume(n: usize) -> f64 {
    let half = n as f64 / 2.0;
    std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half + 1.0)
}
