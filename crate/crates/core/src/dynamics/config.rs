use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tolerances::TOL_OVERLAP;
use crate::vecops::{dot, norm2};

/// A point `Z_s = (X_s, V_s)` of `s` hard spheres of diameter `diameter` in `R^d`.
///
/// Coordinates are stored flat, particle-major: particle `i` occupies
/// `positions[i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    dim: usize,
    diameter: f64,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl Configuration {
    /// Builds a configuration and checks every invariant, including exclusion.
    pub fn new(dim: usize, diameter: f64, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        let config = Self::from_parts(dim, diameter, positions, velocities)?;
        if let Some((i, j)) = config.overlapping_pair() {
            return Err(Error::invalid(format!("particles {i} and {j} overlap")));
        }
        Ok(config)
    }

    /// Builds a configuration checking shapes and finiteness but not exclusion.
    pub fn from_parts(dim: usize, diameter: f64, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("dimension must be at least 2, got {dim}")));
        }
        if !(diameter > 0.0 && diameter.is_finite()) {
            return Err(Error::invalid(format!("diameter must be positive, got {diameter}")));
        }
        if positions.len() != velocities.len() || positions.len() % dim != 0 {
            return Err(Error::invalid("positions and velocities must both hold s*d coordinates"));
        }
        if positions.iter().chain(&velocities).any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(Self { dim, diameter, positions, velocities })
    }

    pub(crate) fn from_parts_unchecked(dim: usize, diameter: f64, positions: Vec<f64>, velocities: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len(), velocities.len());
        Self { dim, diameter, positions, velocities }
    }

    /// An empty configuration (zero particles).
    pub fn empty(dim: usize, diameter: f64) -> Self {
        Self { dim, diameter, positions: Vec::new(), velocities: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Number of particles `s`.
    pub fn count(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    /// Same configuration with a different diameter (no exclusion check).
    pub fn with_diameter(&self, diameter: f64) -> Self {
        Self { diameter, ..self.clone() }
    }

    /// `E_s = 1/2 sum |v_i|^2`.
    pub fn energy(&self) -> f64 {
        0.5 * norm2(&self.velocities)
    }

    /// `I_s = 1/2 sum |x_i|^2`.
    pub fn inertia(&self) -> f64 {
        0.5 * norm2(&self.positions)
    }

    pub fn momentum(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        for v in self.velocities.chunks_exact(self.dim) {
            p.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        p
    }

    /// Euclidean norm of the full phase-space vector.
    pub fn phase_norm(&self) -> f64 {
        (norm2(&self.positions) + norm2(&self.velocities)).sqrt()
    }

    /// `V_s -> -V_s`.
    pub fn flip_velocities(&self) -> Self {
        let mut out = self.clone();
        out.velocities.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Free motion of every particle for time `tau` (no collisions).
    pub fn free_shift(&self, tau: f64) -> Self {
        let mut out = self.clone();
        out.advance(tau);
        out
    }

    pub(crate) fn advance(&mut self, tau: f64) {
        for (x, v) in self.positions.iter_mut().zip(&self.velocities) {
            *x += v * tau;
        }
    }

    /// `Z^{(i)}`: the configuration with particle `i` removed.
    pub fn without(&self, i: usize) -> Self {
        let d = self.dim;
        let mut positions = self.positions.clone();
        let mut velocities = self.velocities.clone();
        positions.drain(i * d..(i + 1) * d);
        velocities.drain(i * d..(i + 1) * d);
        Self { dim: d, diameter: self.diameter, positions, velocities }
    }

    /// Appends a particle without checking exclusion.
    pub fn push(&mut self, x: &[f64], v: &[f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(v.len(), self.dim);
        self.positions.extend_from_slice(x);
        self.velocities.extend_from_slice(v);
    }

    /// `sigma Z`: particle `k` of the result is particle `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.count());
        let mut out = Self::empty(self.dim, self.diameter);
        for &p in perm {
            out.push(self.position(p), self.velocity(p));
        }
        out
    }

    /// Sub-configuration made of the listed particles, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.dim, self.diameter);
        for &p in indices {
            out.push(self.position(p), self.velocity(p));
        }
        out
    }

    /// Squared distance between the centres of particles `i` and `j`.
    pub fn distance2(&self, i: usize, j: usize) -> f64 {
        self.position(i).iter().zip(self.position(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// True if particles `i` and `j` overlap beyond the roundoff allowance.
    pub fn pair_overlaps(&self, i: usize, j: usize) -> bool {
        let lim = self.diameter * (1.0 - TOL_OVERLAP);
        self.distance2(i, j) < lim * lim
    }

    /// Smallest pairwise distance minus the diameter (infinite for s < 2).
    pub fn min_gap(&self) -> f64 {
        let s = self.count();
        let mut best = f64::INFINITY;
        for i in 0..s {
            for j in i + 1..s {
                best = best.min(self.distance2(i, j).sqrt() - self.diameter);
            }
        }
        best
    }

    /// Some pair violating exclusion, if any.
    pub fn overlapping_pair(&self) -> Option<(usize, usize)> {
        let s = self.count();
        if s <= 64 {
            for i in 0..s {
                for j in i + 1..s {
                    if self.pair_overlaps(i, j) {
                        return Some((i, j));
                    }
                }
            }
            return None;
        }
        // Hash grid with cell width equal to the diameter.
        let w = self.diameter;
        let d = self.dim;
        let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for i in 0..s {
            let key: Vec<i64> = self.position(i).iter().map(|c| (c / w).floor() as i64).collect();
            grid.entry(key).or_default().push(i);
        }
        let mut offset = vec![-1i64; d];
        for (key, members) in &grid {
            loop {
                let other: Vec<i64> = key.iter().zip(&offset).map(|(a, b)| a + b).collect();
                if let Some(others) = grid.get(&other) {
                    for &i in members {
                        for &j in others {
                            if i < j && self.pair_overlaps(i, j) {
                                return Some((i, j));
                            }
                        }
                    }
                }
                if !next_offset(&mut offset) {
                    break;
                }
            }
            offset.iter_mut().for_each(|o| *o = -1);
        }
        None
    }

    /// True if the configuration lies in `D_s`.
    pub fn is_valid(&self) -> bool {
        self.overlapping_pair().is_none()
    }

    /// `<v_i - v_j, x_i - x_j>`.
    pub fn pair_approach(&self, i: usize, j: usize) -> f64 {
        let dx: Vec<f64> = self.position(i).iter().zip(self.position(j)).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = self.velocity(i).iter().zip(self.velocity(j)).map(|(a, b)| a - b).collect();
        dot(&dx, &dv)
    }
}

/// Advances a {-1,0,1}^d odometer; false once it wraps.
pub(crate) fn next_offset(offset: &mut [i64]) -> bool {
    for o in offset.iter_mut() {
        if *o < 1 {
            *o += 1;
            return true;
        }
        *o = -1;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_overlap_and_bad_shapes() {
        assert!(Configuration::new(2, 1.0, vec![0.0, 0.0, 0.5, 0.0], vec![0.0; 4]).is_err());
        assert!(Configuration::new(2, 1.0, vec![0.0, 0.0, 1.0], vec![0.0; 3]).is_err());
        assert!(Configuration::new(1, 1.0, vec![0.0], vec![0.0]).is_err());
        assert!(Configuration::new(2, 1.0, vec![0.0, f64::NAN], vec![0.0; 2]).is_err());
        assert!(Configuration::new(2, 1.0, vec![0.0, 0.0, 1.0, 0.0], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn grid_overlap_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = 200;
            let pos: Vec<f64> = (0..2 * s).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = Configuration::from_parts(2, 0.05, pos, vec![0.0; 2 * s]).unwrap();
            let brute = (0..s).any(|i| (i + 1..s).any(|j| c.pair_overlaps(i, j)));
            assert_eq!(brute, c.overlapping_pair().is_some());
        }
    }

    #[test]
    fn energy_and_inertia() {
        let c = Configuration::new(2, 0.1, vec![0.0, 0.0], vec![2.0, 0.0]).unwrap();
        assert_eq!(c.energy(), 2.0);
        assert_eq!(c.inertia(), 0.0);
        let c = Configuration::from_parts(3, 0.1, vec![0.0; 9], vec![1.0; 9]).unwrap();
        assert_eq!(c.inertia(), 0.0);
    }

    #[test]
    fn remove_and_permute() {
        let c = Configuration::new(2, 0.1, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let r = c.without(1);
        assert_eq!(r.count(), 2);
        assert_eq!(r.velocity(1), &[3.0, 0.0]);
        let p = c.permuted(&[2, 0, 1]);
        assert_eq!(p.position(0), &[2.0, 0.0]);
        assert_eq!(p.position(2), &[1.0, 0.0]);
    }
}
