//! Exact event-driven dynamics of hard spheres in `R^d`.

mod cells;
mod collision;
mod config;
mod flow;
pub mod io;

pub use collision::{collide, impact, time_of_impact, Impact};
pub use config::Configuration;
pub(crate) use collision::collide_in_place;
pub(crate) use config::next_offset;
pub use flow::{
    backward_free_noncolliding, flow, flow_forward_visit, flow_with, CollisionEvent, FlowOptions, FlowResult, FlowStrategy,
    ALL_PAIRS_LIMIT,
};

/// Total kinetic energy `E_s`.
pub fn energy(config: &Configuration) -> f64 {
    config.energy()
}

/// Moment of inertia `I_s`.
pub fn inertia(config: &Configuration) -> f64 {
    config.inertia()
}

/// Sanity ceiling `(32 s^{3/2})^{s^2}` on the number of collisions of `s`
/// spheres, as a natural logarithm.
pub fn ln_collision_ceiling(s: usize) -> f64 {
    let s = s as f64;
    s * s * (32.0 * s.powf(1.5)).ln()
}

/// A random gas of `s` spheres in the box `[0, side]^d` with velocities
/// uniform in `[-1, 1]^d`, by rejection.
pub fn random_gas<R: rand::Rng + ?Sized>(rng: &mut R, s: usize, dim: usize, eps: f64, side: f64) -> Configuration {
    loop {
        let x: Vec<f64> = (0..s * dim).map(|_| rng.random_range(0.0..side)).collect();
        let v: Vec<f64> = (0..s * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(c) = Configuration::new(dim, eps, x, v) {
            return c;
        }
    }
}

/// A dense gas: one sphere per site of a jittered cubic lattice with
/// `per_side^d` sites and the given spacing, velocities uniform in `[-1, 1]^d`.
pub fn lattice_gas<R: rand::Rng + ?Sized>(rng: &mut R, per_side: usize, dim: usize, eps: f64, spacing: f64) -> crate::error::Result<Configuration> {
    if !(spacing > eps) {
        return Err(crate::error::Error::invalid("lattice spacing must exceed the diameter"));
    }
    let jitter = 0.5 * (spacing - eps);
    let n = per_side.pow(dim as u32);
    let mut x = Vec::with_capacity(n * dim);
    for site in 0..n {
        let mut rest = site;
        for _ in 0..dim {
            x.push((rest % per_side) as f64 * spacing + rng.random_range(-jitter..jitter));
            rest /= per_side;
        }
    }
    let v: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Configuration::new(dim, eps, x, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{det, fd_jacobian};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_on(eps: f64) -> Configuration {
        Configuration::new(2, eps, vec![0.0, 0.0, 3.0 * eps, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_duration_is_identity() {
        let c = head_on(0.1);
        let r = flow(&c, 0.0).unwrap();
        assert_eq!(r.final_state, c);
        assert!(r.events.is_empty());
    }

    #[test]
    fn two_body_head_on() {
        let eps = 0.1;
        let r = flow(&head_on(eps), 4.0 * eps).unwrap();
        assert_eq!(r.events.len(), 1);
        let ev = &r.events[0];
        assert!((ev.time - 2.0 * eps).abs() < 1e-15);
        assert_eq!(ev.pair, (0, 1));
        assert_eq!(ev.post_velocities, (vec![0.0, 0.0], vec![1.0, 0.0]));
        // Hand solution: particle 0 stops at x = 2 eps, particle 1 leaves at unit speed.
        let f = &r.final_state;
        assert!((f.position(0)[0] - 2.0 * eps).abs() < 1e-15);
        assert!((f.position(1)[0] - 5.0 * eps).abs() < 1e-15);
    }

    #[test]
    fn backward_flow_logs_negative_times() {
        let eps = 0.1;
        let after = flow(&head_on(eps), 4.0 * eps).unwrap().final_state;
        let back = flow(&after, -4.0 * eps).unwrap();
        assert_eq!(back.events.len(), 1);
        assert!((back.events[0].time + 2.0 * eps).abs() < 1e-15);
        let c = head_on(eps);
        for (a, b) in back.final_state.positions().iter().zip(c.positions()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(back.final_state.velocities(), c.velocities());
    }

    #[test]
    fn triple_contact_is_degenerate() {
        // Two particles hit a resting middle one at the same instant.
        let eps = 0.1;
        let c = Configuration::new(2, eps, vec![-0.5, 0.0, 0.0, 0.0, 0.5, 0.0], vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        let err = flow(&c, 1.0).unwrap_err();
        assert!(err.is_degenerate());
    }

    #[test]
    fn strict_mode_rejects_grazing() {
        let eps = 0.1;
        let c = Configuration::new(2, eps, vec![0.0, 0.0, 1.0, eps], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(flow(&c, 2.0).unwrap().events.is_empty());
        assert!(flow_with(&c, 2.0, &FlowOptions::strict()).unwrap_err().is_degenerate());
    }

    #[test]
    fn runaway_cap() {
        let c = Configuration::new(2, 0.1, vec![0.0, 0.0, 0.2, 0.0, 0.45, 0.0], vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        let opts = FlowOptions { max_events: 1, ..FlowOptions::default() };
        assert!(matches!(flow_with(&c, 1.0, &opts), Err(crate::error::Error::Runaway(1))));
    }

    #[test]
    fn k_s_membership() {
        let one = Configuration::new(2, 0.1, vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert!(backward_free_noncolliding(&one));
        let same_v = Configuration::new(2, 0.1, vec![0.0, 0.0, 0.15, 0.0], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(backward_free_noncolliding(&same_v));
        // Separating now along x; backward the pair passes at distance 0.05 < eps.
        // r = x_0 - x_1 = (-1, -0.05), u = v_0 - v_1 = (-1, 0): r.u = 1 > 0,
        // min |r - u tau|^2 = |r|^2 - (r.u)^2/|u|^2 = 0.0025.
        let sep = Configuration::new(2, 0.1, vec![-0.5, 0.0, 0.5, 0.05], vec![-0.5, 0.0, 0.5, 0.0]).unwrap();
        assert!(!backward_free_noncolliding(&sep));
        let wide = Configuration::new(2, 0.1, vec![-0.5, 0.0, 0.5, 0.2], vec![-0.5, 0.0, 0.5, 0.0]).unwrap();
        assert!(backward_free_noncolliding(&wide));
        // Agreement with the actual backward flow on the separating pair.
        assert_eq!(flow(&sep, -3.0).unwrap().events.len(), 1);
    }

    #[test]
    fn cell_list_matches_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let c = random_gas(&mut rng, 40, 2, 0.05, 1.5);
            let a = flow_with(&c, 2.0, &FlowOptions { strategy: FlowStrategy::AllPairs, ..FlowOptions::default() }).unwrap();
            let b = flow_with(&c, 2.0, &FlowOptions { strategy: FlowStrategy::CellList, ..FlowOptions::default() }).unwrap();
            assert!(!a.events.is_empty());
            assert_eq!(a.events.len(), b.events.len());
            for (x, y) in a.events.iter().zip(&b.events) {
                assert_eq!(x.pair, y.pair);
                assert!((x.time - y.time).abs() < 1e-9);
            }
            for (x, y) in a.final_state.positions().iter().zip(b.final_state.positions()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cell_list_in_three_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_gas(&mut rng, 30, 3, 0.1, 1.0);
        let a = flow_with(&c, 1.0, &FlowOptions { strategy: FlowStrategy::AllPairs, ..FlowOptions::default() }).unwrap();
        let b = flow_with(&c, 1.0, &FlowOptions { strategy: FlowStrategy::CellList, ..FlowOptions::default() }).unwrap();
        assert_eq!(a.events.len(), b.events.len());
        assert!(b.final_state.is_valid());
    }

    #[test]
    fn flow_jacobian_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 5 {
            let c = random_gas(&mut rng, 3, 2, 0.3, 1.0);
            let r = flow(&c, 1.0).unwrap();
            if r.events.is_empty() {
                continue;
            }
            let n0 = r.events.len();
            let mut z: Vec<f64> = c.positions().to_vec();
            z.extend_from_slice(c.velocities());
            let map = |p: &[f64]| {
                let cc = Configuration::from_parts(2, 0.3, p[..6].to_vec(), p[6..].to_vec())?;
                let out = flow(&cc, 1.0)?;
                if out.events.len() != n0 {
                    return Err(crate::error::Error::degenerate("event count changed"));
                }
                let mut o = out.final_state.positions().to_vec();
                o.extend_from_slice(out.final_state.velocities());
                Ok(o)
            };
            let Ok(j) = fd_jacobian(&z, 1e-6, map) else { continue };
            assert!((det(j, 12).abs() - 1.0).abs() < 1e-4);
            checked += 1;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conservation_reversibility_finiteness(seed in 0u64..u64::MAX, s in 2usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_gas(&mut rng, s, 2, 0.2, 1.0);
            let r = match flow(&c, 2.0) {
                Ok(r) => r,
                Err(e) if e.is_degenerate() => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(r.final_state.is_valid());
            prop_assert!((r.events.len() as f64).ln() <= ln_collision_ceiling(s));
            let e0 = c.energy();
            prop_assert!((r.final_state.energy() - e0).abs() <= 1e-10 * e0.max(1e-300));
            let (p0, p1) = (c.momentum(), r.final_state.momentum());
            for k in 0..2 {
                prop_assert!((p0[k] - p1[k]).abs() <= 1e-10 * (1.0 + e0.sqrt()));
            }
            for w in r.events.windows(2) {
                prop_assert!(w[0].time <= w[1].time);
            }
            let back = flow(&r.final_state.flip_velocities(), 2.0).unwrap().final_state.flip_velocities();
            let tol = 1e-8 * (1.0 + c.phase_norm());
            for (a, b) in back.positions().iter().zip(c.positions()) {
                prop_assert!((a - b).abs() <= tol);
            }
            for (a, b) in back.velocities().iter().zip(c.velocities()) {
                prop_assert!((a - b).abs() <= tol);
            }
        }
    }
}
