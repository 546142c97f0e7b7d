use crate::error::{Error, Result};
use crate::tolerances::{TOL_GRAZE, TOL_UNIT};
use crate::vecops::{diff_of_products, dot, norm2};

/// Specular reflection of a pair across the contact normal `omega`:
/// `v_i* = v_i + omega omega.(v_j - v_i)`, `v_j* = v_j - omega omega.(v_j - v_i)`.
pub fn collide(vi: &[f64], vj: &[f64], omega: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if vi.len() != vj.len() || vi.len() != omega.len() {
        return Err(Error::invalid("dimension mismatch in collide"));
    }
    if (norm2(omega) - 1.0).abs() > TOL_UNIT {
        return Err(Error::invalid(format!("contact normal is not unit: |omega|^2 = {}", norm2(omega))));
    }
    let mut a = vi.to_vec();
    let mut b = vj.to_vec();
    collide_in_place(&mut a, &mut b, omega);
    Ok((a, b))
}

/// In-place [`collide`] without the unit check.
#[inline]
pub(crate) fn collide_in_place(vi: &mut [f64], vj: &mut [f64], omega: &[f64]) {
    let g: f64 = omega.iter().zip(vi.iter().zip(vj.iter())).map(|(w, (a, b))| w * (b - a)).sum();
    for ((a, b), w) in vi.iter_mut().zip(vj.iter_mut()).zip(omega) {
        let dv = w * g;
        *a += dv;
        *b -= dv;
    }
}

/// Outcome of a pairwise contact query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Impact {
    /// Contact after the given non-negative flight time.
    Hit(f64),
    /// The trajectories never reach distance `eps` while approaching.
    Miss,
    /// Tangential contact: the discriminant is within the grazing tolerance.
    /// `at` is the time of closest approach.
    Grazing { at: f64 },
}

/// Contact query for relative position `dx = x_i - x_j` and relative velocity
/// `dv = v_i - v_j`. Solves `|dx + dv t| = eps` from the quadratic in closed form.
pub fn impact(dx: &[f64], dv: &[f64], eps: f64) -> Impact {
    let a = norm2(dv);
    let b = dot(dx, dv);
    if b >= 0.0 || a == 0.0 {
        return Impact::Miss;
    }
    let c = (-eps).mul_add(eps, norm2(dx));
    // disc = b^2 - a c, compensated.
    let disc = diff_of_products(b, b, a, c);
    if disc < 0.0 {
        return Impact::Miss;
    }
    if disc <= TOL_GRAZE * a * eps * eps {
        return Impact::Grazing { at: -b / a };
    }
    if c <= 0.0 {
        return Impact::Hit(0.0);
    }
    Impact::Hit(c / (-b + disc.sqrt()))
}

/// Smallest positive time at which spheres `i` and `j` touch while approaching.
///
/// Returns `None` for receding pairs, misses and grazing contacts.
pub fn time_of_impact(xi: &[f64], vi: &[f64], xj: &[f64], vj: &[f64], eps: f64) -> Result<Option<f64>> {
    let d = xi.len();
    if [vi.len(), xj.len(), vj.len()].iter().any(|&l| l != d) {
        return Err(Error::invalid("dimension mismatch in time_of_impact"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("diameter must be positive"));
    }
    let dx: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    let dv: Vec<f64> = vi.iter().zip(vj).map(|(a, b)| a - b).collect();
    let lim = eps * (1.0 - crate::tolerances::TOL_OVERLAP);
    if norm2(&dx) < lim * lim {
        return Err(Error::invalid("overlapping spheres"));
    }
    Ok(match impact(&dx, &dv, eps) {
        Impact::Hit(t) if t > 0.0 => Some(t),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn head_on_exchange() {
        let (a, b) = collide(&[1.0, 0.0], &[-1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(a, vec![-1.0, 0.0]);
        assert_eq!(b, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_relative_velocity_unchanged() {
        let w = [0.6, 0.8];
        let (a, b) = collide(&[0.0, 1.0], &[0.0, 1.0], &w).unwrap();
        assert_eq!(a, vec![0.0, 1.0]);
        assert_eq!(b, vec![0.0, 1.0]);
    }

    #[test]
    fn oblique_against_scalar_evaluation() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let (vi, vj, w) = ([1.0, 0.0], [0.0, 1.0], [r, r]);
        // Independent scalar evaluation of omega . (v_j - v_i).
        let g = w[0] * (vj[0] - vi[0]) + w[1] * (vj[1] - vi[1]);
        assert!(g.abs() < 1e-15);
        let (a, b) = collide(&vi, &vj, &w).unwrap();
        // The relative velocity is tangent to omega: nothing changes.
        assert_eq!(a, vi.to_vec());
        assert_eq!(b, vj.to_vec());

        let (vi, vj) = ([1.0, 0.0], [-0.5, 0.25]);
        let g = w[0] * (vj[0] - vi[0]) + w[1] * (vj[1] - vi[1]);
        let expect_i = [vi[0] + w[0] * g, vi[1] + w[1] * g];
        let (a, b) = collide(&vi, &vj, &w).unwrap();
        assert!((a[0] - expect_i[0]).abs() < 1e-15 && (a[1] - expect_i[1]).abs() < 1e-15);
        assert!((a[0] - 0.375).abs() < 1e-15 && (a[1] + 0.625).abs() < 1e-15);
        assert!((b[0] - 0.125).abs() < 1e-15 && (b[1] - 0.875).abs() < 1e-15);
        let e0 = norm2(&vi) + norm2(&vj);
        assert!((norm2(&a) + norm2(&b) - e0).abs() < 1e-14);
        assert!((a[0] + b[0] - vi[0] - vj[0]).abs() < 1e-15);
    }

    #[test]
    fn non_unit_normal_rejected() {
        assert!(collide(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.1]).is_err());
    }

    #[test]
    fn head_on_impact_time() {
        let eps = 0.1;
        let t = time_of_impact(&[0.0, 0.0], &[1.0, 0.0], &[3.0 * eps, 0.0], &[0.0, 0.0], eps).unwrap();
        assert!((t.unwrap() - 2.0 * eps).abs() < 1e-15);
    }

    #[test]
    fn receding_pair_never_hits() {
        let t = time_of_impact(&[0.0, 0.0], &[-1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(t, None);
    }

    #[test]
    fn wide_pass_misses() {
        // Impact parameter 0.2 > eps = 0.1. Discriminant computed by hand:
        // dx = (-1, -0.2), dv = (1, 0): b = -1, a = 1, c = 1.04 - 0.01 = 1.03,
        // b^2 - a c = -0.03 < 0.
        let (dx, dv) = ([-1.0, -0.2], [1.0, 0.0]);
        let disc = dot(&dx, &dv).powi(2) - norm2(&dv) * (norm2(&dx) - 0.01);
        assert!(disc < 0.0);
        let t = time_of_impact(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.2], &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(t, None);
    }

    #[test]
    fn grazing_reports_absent() {
        let eps = 0.1;
        let t = time_of_impact(&[0.0, 0.0], &[1.0, 0.0], &[1.0, eps], &[0.0, 0.0], eps).unwrap();
        assert_eq!(t, None);
        assert!(matches!(impact(&[-1.0, -eps], &[1.0, 0.0], eps), Impact::Grazing { .. }));
    }

    #[test]
    fn overlapping_inputs_rejected() {
        assert!(time_of_impact(&[0.0, 0.0], &[1.0, 0.0], &[0.05, 0.0], &[0.0, 0.0], 0.1).is_err());
    }

    fn unit(theta: f64, phi: f64) -> Vec<f64> {
        vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
    }

    proptest! {
        #[test]
        fn collide_is_conservative_involution(
            vi in proptest::collection::vec(-5.0f64..5.0, 3),
            vj in proptest::collection::vec(-5.0f64..5.0, 3),
            theta in 0.0f64..std::f64::consts::PI,
            phi in 0.0f64..std::f64::consts::TAU,
        ) {
            let w = unit(theta, phi);
            let (a, b) = collide(&vi, &vj, &w).unwrap();
            let e0 = norm2(&vi) + norm2(&vj);
            prop_assert!((norm2(&a) + norm2(&b) - e0).abs() <= 1e-13 * (1.0 + e0));
            for k in 0..3 {
                prop_assert!((a[k] + b[k] - vi[k] - vj[k]).abs() <= 1e-13 * (1.0 + e0));
            }
            let (a2, b2) = collide(&a, &b, &w).unwrap();
            for k in 0..3 {
                // One roundoff unit relative to the pair's velocity scale.
                let scale = 4.0 * f64::EPSILON * (1.0 + e0.sqrt());
                prop_assert!((a2[k] - vi[k]).abs() <= scale);
                prop_assert!((b2[k] - vj[k]).abs() <= scale);
            }
        }

        #[test]
        fn hit_time_lands_on_contact(
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            v in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let eps = 0.3;
            let xi = [0.0, 0.0];
            let vi = [0.0, 0.0];
            prop_assume!(norm2(&x) > eps * eps * 1.01);
            if let Some(t) = time_of_impact(&xi, &vi, &x, &v, eps).unwrap() {
                let p = [x[0] + v[0] * t, x[1] + v[1] * t];
                prop_assert!((norm2(&p).sqrt() - eps).abs() < 1e-12);
                // approaching at contact
                prop_assert!(dot(&p, &v) < 0.0);
            }
        }
    }
}
