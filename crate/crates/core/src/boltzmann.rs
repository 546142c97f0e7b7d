//! Reference solution of the hard-sphere Boltzmann equation by direct
//! simulation Monte Carlo, with a smoothed pointwise evaluator.
//!
//! Particles carry mass `1/N_p`. A step transports freely, then collides
//! pairs inside spatial cells with the no-time-counter scheme and rate
//! `sigma_d |v - v_2| / ell`, where `sigma_d = int [omega . e]_+ d omega`.
//!
//! The evaluator at time `t` is `f_free + K_h * (mu_dsmc - mu_free)`: the
//! exact free transport of the initial density, corrected by a kernel sum
//! over the particles that have collided at least once, each paired with its
//! own collisionless image. Uncollided particles cancel exactly.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{collide_in_place, Configuration};
use crate::ensembles::DensitySpec;
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, stream, unit_sphere, SimRng};
use crate::stats::Estimate;
use crate::vecops::{dot, norm2};

/// `int_{S^{d-1}} [omega . e]_+ d omega`.
pub fn cross_section(dim: usize) -> f64 {
    match dim {
        2 => 2.0,
        3 => std::f64::consts::PI,
        _ => crate::vecops::ball_volume(dim - 1),
    }
}

/// Impact parameter with density proportional to `|omega . u_hat|`.
pub fn sample_impact<R: Rng + ?Sized>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    let un = norm2(u).sqrt();
    loop {
        let w = unit_sphere(rng, u.len());
        if un == 0.0 || rng.random::<f64>() * un < dot(&w, u).abs() {
            return w;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DsmcOptions {
    /// Edge of the cubic collision cells.
    pub cell_width: f64,
    /// Skip transport and collide all particles in one cell of unit volume.
    pub homogeneous: bool,
    /// Largest allowed `nu dt` in any cell.
    pub max_rate_dt: f64,
}

impl Default for DsmcOptions {
    fn default() -> Self {
        Self { cell_width: 0.25, homogeneous: false, max_rate_dt: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub candidates: u64,
    pub collisions: u64,
    pub occupied_cells: usize,
    /// Cells holding between 2 and 9 particles.
    pub underoccupied_cells: usize,
    /// Candidate pairs whose relative speed exceeded the cell majorant.
    pub exceedances: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: Vec<f64>,
    pub energy: f64,
    /// `int |v|^4 f`.
    pub fourth: f64,
}

impl Moments {
    /// Largest relative change of mass, momentum and energy.
    pub fn conserved_drift(&self, other: &Moments) -> f64 {
        let scale = (2.0 * self.energy).sqrt().max(f64::MIN_POSITIVE);
        let dp = self.momentum.iter().zip(&other.momentum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        let de = (self.energy - other.energy).abs() / self.energy;
        let dm = (self.mass - other.mass).abs() / self.mass;
        dp.max(de).max(dm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotOptions {
    /// Probe particles used for the bias estimate and envelope.
    pub probes: usize,
    /// Subsample size for the bandwidth cross-validation.
    pub cv_points: usize,
    /// `beta_T` of the tracked envelope `sup e^{beta_T |v|^2 / 2} f`.
    pub envelope_beta: f64,
    /// Fixed bandwidth instead of cross-validation.
    pub bandwidth: Option<f64>,
}

impl Default for SnapshotOptions {
    fn default() -> Self {
        Self { probes: 200, cv_points: 2000, envelope_beta: 0.5, bandwidth: None }
    }
}

#[derive(Debug, Clone)]
pub struct KineticSolution {
    dim: usize,
    ell: f64,
    opts: DsmcOptions,
    seed: u64,
    steps: u64,
    time: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    x0: Vec<f64>,
    v0: Vec<f64>,
    collided: Vec<bool>,
    base: Option<DensitySpec>,
    snapshots: Vec<Snapshot>,
    events: u64,
    report: StepReport,
}

impl KineticSolution {
    /// `particles` draws from `spec`, which also serves as the exact free part
    /// of the evaluator.
    pub fn sample(spec: &DensitySpec, particles: usize, ell: f64, seed: u64, opts: DsmcOptions) -> Result<Self> {
        let d = spec.dim;
        let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..particles)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, i as u64);
                spec.sample(&mut rng)
            })
            .collect();
        let mut x = Vec::with_capacity(particles * d);
        let mut v = Vec::with_capacity(particles * d);
        for (a, b) in draws {
            x.extend(a);
            v.extend(b);
        }
        let mut sol = Self::from_particles(d, x, v, ell, seed, opts)?;
        sol.base = Some(spec.clone());
        Ok(sol)
    }

    pub fn from_particles(dim: usize, x: Vec<f64>, v: Vec<f64>, ell: f64, seed: u64, opts: DsmcOptions) -> Result<Self> {
        if dim < 2 || x.len() != v.len() || x.is_empty() || x.len() % dim != 0 {
            return Err(Error::invalid("particle arrays must be non-empty with matching d-vectors"));
        }
        if !(ell > 0.0) || !(opts.cell_width > 0.0) {
            return Err(Error::invalid("ell and the cell width must be positive"));
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite particle data"));
        }
        let n = x.len() / dim;
        Ok(Self {
            dim,
            ell,
            opts,
            seed,
            steps: 0,
            time: 0.0,
            x0: x.clone(),
            v0: v.clone(),
            x,
            v,
            collided: vec![false; n],
            base: None,
            snapshots: Vec::new(),
            events: 0,
            report: StepReport::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> usize {
        self.collided.len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn velocities(&self) -> &[f64] {
        &self.v
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    /// Fraction of particles that collided at least once.
    pub fn collided_fraction(&self) -> f64 {
        self.collided.iter().filter(|&&c| c).count() as f64 / self.particles() as f64
    }

    /// Accumulated step diagnostics.
    pub fn report(&self) -> StepReport {
        self.report
    }

    pub fn moments(&self) -> Moments {
        let d = self.dim;
        let n = self.particles() as f64;
        let mut p = vec![0.0; d];
        let sq: Vec<f64> = self.v.chunks(d).map(norm2).collect();
        for c in self.v.chunks(d) {
            for (a, b) in p.iter_mut().zip(c) {
                *a += b;
            }
        }
        let quart: Vec<f64> = sq.iter().map(|s| s * s).collect();
        Moments {
            mass: 1.0,
            momentum: p.into_iter().map(|c| c / n).collect(),
            energy: 0.5 * crate::stats::pairwise_sum(&sq) / n,
            fourth: crate::stats::pairwise_sum(&quart) / n,
        }
    }

    fn cell_of(&self, i: usize) -> [i64; 3] {
        let mut key = [0i64; 3];
        if !self.opts.homogeneous {
            for (k, c) in self.x[i * self.dim..(i + 1) * self.dim].iter().enumerate() {
                key[k] = (c / self.opts.cell_width).floor() as i64;
            }
        }
        key
    }

    /// One splitting step: free transport, then collisions cell by cell.
    pub fn step(&mut self, dt: f64) -> Result<StepReport> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("time step must be positive"));
        }
        let d = self.dim;
        let np = self.particles();
        if !self.opts.homogeneous {
            for (x, v) in self.x.iter_mut().zip(&self.v) {
                *x += v * dt;
            }
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for i in 0..np {
            cells.entry(self.cell_of(i)).or_default().push(i as u32);
        }
        let mut keys: Vec<[i64; 3]> = cells.keys().copied().collect();
        keys.sort_unstable();
        let volume = if self.opts.homogeneous { 1.0 } else { self.opts.cell_width.powi(d as i32) };
        let coef = cross_section(d) * dt / (self.ell * np as f64 * volume);
        let v = &self.v;
        // Rate check before touching velocities.
        let worst = keys
            .par_iter()
            .map(|k| {
                let idx = &cells[k];
                let n = idx.len();
                if n < 2 {
                    return 0.0;
                }
                let (_, spread) = cell_spread(v, d, idx);
                let urms = (2.0 * spread / n as f64).sqrt();
                coef * (n - 1) as f64 * urms
            })
            .reduce(|| 0.0, f64::max);
        if worst > self.opts.max_rate_dt {
            return Err(Error::invalid(format!("time step too large: nu dt = {worst:.3} in the densest cell")));
        }
        let step_seed = self.seed ^ (self.steps + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let results: Vec<(Vec<(u32, Vec<f64>)>, StepReport)> = keys
            .par_iter()
            .enumerate()
            .map(|(ci, k)| {
                let mut rng = stream(step_seed, ci as u64);
                collide_cell(v, d, &cells[k], coef, &mut rng)
            })
            .collect();
        let mut report = StepReport::default();
        for (updates, r) in results {
            for (i, vel) in updates {
                let i = i as usize;
                self.v[i * d..(i + 1) * d].copy_from_slice(&vel);
                self.collided[i] = true;
            }
            report.candidates += r.candidates;
            report.collisions += r.collisions;
            report.occupied_cells += r.occupied_cells;
            report.underoccupied_cells += r.underoccupied_cells;
            report.exceedances += r.exceedances;
        }
        self.events += report.collisions;
        self.steps += 1;
        self.time += dt;
        self.report.candidates += report.candidates;
        self.report.collisions += report.collisions;
        self.report.exceedances += report.exceedances;
        self.report.occupied_cells = report.occupied_cells;
        self.report.underoccupied_cells = report.underoccupied_cells;
        Ok(report)
    }

    /// Steps of size at most `dt` until time `t`, then stores a snapshot.
    pub fn run_to(&mut self, t: f64, dt: f64, snap: &SnapshotOptions) -> Result<&Snapshot> {
        if t < self.time {
            return Err(Error::invalid("cannot run backwards"));
        }
        let steps = ((t - self.time) / dt).ceil() as usize;
        if steps > 0 {
            let h = (t - self.time) / steps as f64;
            for _ in 0..steps {
                self.step(h)?;
            }
        }
        self.time = t;
        let s = self.snapshot(snap)?;
        self.snapshots.push(s);
        Ok(self.snapshots.last().expect("just pushed"))
    }

    /// Smoothed evaluator for the current state.
    pub fn snapshot(&self, opts: &SnapshotOptions) -> Result<Snapshot> {
        if self.opts.homogeneous {
            return Err(Error::invalid("no phase-space evaluator in homogeneous mode"));
        }
        let d = self.dim;
        let np = self.particles();
        let t = self.time;
        let phase = |x: &[f64], v: &[f64], i: usize| -> Vec<f64> {
            let mut z = x[i * d..(i + 1) * d].to_vec();
            z.extend_from_slice(&v[i * d..(i + 1) * d]);
            z
        };
        let mut rng = stream(self.seed ^ 0x5a5a, self.steps);
        let h = match opts.bandwidth {
            Some(h) => h,
            None => {
                let m = opts.cv_points.min(np);
                let pts: Vec<Vec<f64>> = (0..m).map(|_| phase(&self.x, &self.v, rng.random_range(0..np))).collect();
                let half = m / 2;
                let h_sub = lscv_bandwidth(&pts[..half], &pts[half..]);
                h_sub * (half as f64 / np as f64).powf(1.0 / (2 * d + 4) as f64)
            }
        };
        let mut plus = PhaseGrid::new(2 * d, 5.0 * h);
        let mut minus = PhaseGrid::new(2 * d, 5.0 * h);
        match &self.base {
            Some(_) => {
                for i in (0..np).filter(|&i| self.collided[i]) {
                    plus.insert(&phase(&self.x, &self.v, i));
                    let mut free = phase(&self.x0, &self.v0, i);
                    for k in 0..d {
                        free[k] += free[d + k] * t;
                    }
                    minus.insert(&free);
                }
            }
            None => {
                for i in 0..np {
                    plus.insert(&phase(&self.x, &self.v, i));
                }
            }
        }
        let mut snap = Snapshot {
            time: t,
            dim: d,
            particles: np,
            bandwidth: h,
            bias: 0.0,
            kde_stderr: 0.0,
            envelope: 0.0,
            collided_fraction: self.collided_fraction(),
            base: self.base.clone(),
            plus,
            minus,
        };
        let probes: Vec<Vec<f64>> = (0..opts.probes).map(|_| phase(&self.x, &self.v, rng.random_range(0..np))).collect();
        let stats: Vec<(f64, f64, f64)> = probes
            .par_iter()
            .map(|z| {
                let a = snap.kde(z, h);
                let b = snap.kde(z, h / 2.0);
                let env = (0.5 * opts.envelope_beta * norm2(&z[d..])).exp() * a.value.max(0.0);
                (4.0 / 3.0 * (a.value - b.value).abs(), a.stderr, env)
            })
            .collect();
        let n = stats.len().max(1) as f64;
        snap.bias = stats.iter().map(|s| s.0).sum::<f64>() / n;
        snap.kde_stderr = stats.iter().map(|s| s.1).sum::<f64>() / n;
        snap.envelope = stats.iter().map(|s| s.2).fold(0.0, f64::max);
        Ok(snap)
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Stored snapshot at time `t`.
    pub fn at(&self, t: f64) -> Result<&Snapshot> {
        self.snapshots.iter().find(|s| (s.time - t).abs() <= 1e-12 * t.abs().max(1.0)).ok_or(Error::NotStored(t))
    }

    /// `f(t, x, v)`.
    pub fn evaluate_f(&self, t: f64, x: &[f64], v: &[f64]) -> Result<f64> {
        let snap = self.at(t)?;
        if x.len() != self.dim || v.len() != self.dim {
            return Err(Error::invalid("dimension mismatch"));
        }
        let mut z = x.to_vec();
        z.extend_from_slice(v);
        Ok(snap.evaluate(&z))
    }

    /// `f^{otimes s}(t, Z_s)`.
    pub fn tensor_power(&self, t: f64, z: &Configuration) -> Result<f64> {
        let snap = self.at(t)?;
        if z.dim() != self.dim {
            return Err(Error::invalid("dimension mismatch"));
        }
        Ok(snap.tensor_power(z))
    }
}

/// `(mean velocity, sum |v - mean|^2)` over a cell.
fn cell_spread(v: &[f64], d: usize, idx: &[u32]) -> (Vec<f64>, f64) {
    let n = idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        for (m, c) in mean.iter_mut().zip(&v[i as usize * d..(i as usize + 1) * d]) {
            *m += c / n;
        }
    }
    let spread = idx
        .iter()
        .map(|&i| v[i as usize * d..(i as usize + 1) * d].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    (mean, spread)
}

fn collide_cell(v: &[f64], d: usize, idx: &[u32], coef: f64, rng: &mut SimRng) -> (Vec<(u32, Vec<f64>)>, StepReport) {
    let n = idx.len();
    let mut report = StepReport { occupied_cells: 1, ..StepReport::default() };
    if n < 2 {
        return (Vec::new(), report);
    }
    if n < 10 {
        report.underoccupied_cells = 1;
    }
    let mut local: Vec<f64> = idx.iter().flat_map(|&i| v[i as usize * d..(i as usize + 1) * d].iter().copied()).collect();
    let (mean, _) = cell_spread(v, d, idx);
    let rmax = local.chunks(d).map(|c| c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).fold(0.0, f64::max).sqrt();
    let umax = 2.0 * rmax;
    if umax == 0.0 {
        return (Vec::new(), report);
    }
    let expected = 0.5 * (n * (n - 1)) as f64 * coef * umax;
    let m = (expected + rng.random::<f64>()).floor() as u64;
    report.candidates = m;
    let mut touched = vec![false; n];
    let mut u = vec![0.0; d];
    for _ in 0..m {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        for k in 0..d {
            u[k] = local[b * d + k] - local[a * d + k];
        }
        let speed = norm2(&u).sqrt();
        if speed > umax {
            report.exceedances += 1;
        }
        if rng.random::<f64>() * umax >= speed {
            continue;
        }
        let w = sample_impact(rng, &u);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (head, tail) = local.split_at_mut(hi * d);
        collide_in_place(&mut head[lo * d..(lo + 1) * d], &mut tail[..d], &w);
        touched[a] = true;
        touched[b] = true;
        report.collisions += 1;
    }
    let updates = (0..n).filter(|&p| touched[p]).map(|p| (idx[p], local[p * d..(p + 1) * d].to_vec())).collect();
    (updates, report)
}

/// Least-squares cross-validation of a Gaussian kernel width: `A` builds the
/// estimate, `B` scores it.
pub fn lscv_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dim = a.first().map_or(1, Vec::len);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let gauss = |r2: f64, h: f64| (-r2 / (2.0 * h * h)).exp() / (2.0 * std::f64::consts::PI * h * h).powf(dim as f64 / 2.0);
    let d2 = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let grid: Vec<f64> = (0..25).map(|i| 0.04 * (1.15f64).powi(i)).collect();
    let scores: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&h| {
            let mut sq = 0.0;
            for p in a {
                for q in a {
                    sq += gauss(d2(p, q), h * std::f64::consts::SQRT_2);
                }
            }
            let mut cross = 0.0;
            for q in b {
                for p in a {
                    cross += gauss(d2(p, q), h);
                }
            }
            (h, sq / (na * na) - 2.0 * cross / (na * nb))
        })
        .collect();
    scores.iter().min_by(|x, y| x.1.total_cmp(&y.1)).map_or(0.3, |s| s.0)
}

#[derive(Debug, Clone)]
struct PhaseGrid {
    dim: usize,
    width: f64,
    points: Vec<f64>,
    cells: HashMap<Vec<i64>, Vec<u32>>,
}

impl PhaseGrid {
    fn new(dim: usize, width: f64) -> Self {
        Self { dim, width, points: Vec::new(), cells: HashMap::new() }
    }

    fn key(&self, z: &[f64]) -> Vec<i64> {
        z.iter().map(|c| (c / self.width).floor() as i64).collect()
    }

    fn insert(&mut self, z: &[f64]) {
        let i = (self.points.len() / self.dim) as u32;
        self.points.extend_from_slice(z);
        let k = self.key(z);
        self.cells.entry(k).or_default().push(i);
    }

    /// Kernel values `K_h(z - p)` of all points within `5h`, `h <= width / 5`.
    fn for_each_kernel(&self, z: &[f64], h: f64, mut f: impl FnMut(u32, f64)) {
        let base = self.key(z);
        let norm = (2.0 * std::f64::consts::PI * h * h).powf(self.dim as f64 / 2.0);
        let cut = 25.0 * h * h;
        let mut off = vec![-1i64; self.dim];
        let mut key = base.clone();
        loop {
            for (k, (b, o)) in key.iter_mut().zip(base.iter().zip(&off)) {
                *k = b + o;
            }
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    let p = &self.points[i as usize * self.dim..(i as usize + 1) * self.dim];
                    let r2: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    if r2 <= cut {
                        f(i, (-r2 / (2.0 * h * h)).exp() / norm);
                    }
                }
            }
            if !crate::dynamics::next_offset(&mut off) {
                break;
            }
        }
    }
}

/// Kernel estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KdeValue {
    pub value: f64,
    pub stderr: f64,
}

/// Smoothed density at one output time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub dim: usize,
    pub particles: usize,
    pub bandwidth: f64,
    /// Mean Richardson bias estimate `4/3 |f_h - f_{h/2}|` over probe particles.
    pub bias: f64,
    pub kde_stderr: f64,
    /// `sup e^{beta_T |v|^2 / 2} f` over probe particles.
    pub envelope: f64,
    pub collided_fraction: f64,
    base: Option<DensitySpec>,
    plus: PhaseGrid,
    minus: PhaseGrid,
}

impl Snapshot {
    /// Estimate at phase point `z = (x, v)` with bandwidth `h <= bandwidth`,
    /// before clamping to non-negative values.
    pub fn kde(&self, z: &[f64], h: f64) -> KdeValue {
        let d = self.dim;
        let h = h.min(self.bandwidth);
        let base = self.base.as_ref().map_or(0.0, |spec| {
            let x0: Vec<f64> = (0..d).map(|k| z[k] - z[d + k] * self.time).collect();
            spec.density(&x0, &z[d..])
        });
        // Per-particle contributions D_i; plus and minus share indices.
        let mut contrib: HashMap<u32, f64> = HashMap::new();
        self.plus.for_each_kernel(z, h, |i, k| *contrib.entry(i).or_default() += k);
        self.minus.for_each_kernel(z, h, |i, k| *contrib.entry(i).or_default() -= k);
        let np = self.particles as f64;
        let sum: f64 = contrib.values().sum();
        let sum2: f64 = contrib.values().map(|c| c * c).sum();
        let mean = sum / np;
        let var = (sum2 / np - mean * mean).max(0.0);
        KdeValue { value: base + mean, stderr: (var / np).sqrt() }
    }

    /// Non-negative `f(t, z)`.
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.kde(z, self.bandwidth).value.max(0.0)
    }

    pub fn tensor_power(&self, z: &Configuration) -> f64 {
        (0..z.count())
            .map(|i| {
                let mut p = z.position(i).to_vec();
                p.extend_from_slice(z.velocity(i));
                self.evaluate(&p)
            })
            .product()
    }
}

/// Outcome of a refinement pair: `(N_p, h)` against `(2 N_p, h/2)` with
/// independent particles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementReport {
    pub bandwidth: f64,
    pub mean_change: f64,
    pub mean_bias: f64,
    pub consistent: bool,
}

/// Runs both resolutions to `t` and compares the evaluators at probe points
/// drawn from `spec`.
pub fn refinement_check(spec: &DensitySpec, particles: usize, ell: f64, t: f64, dt: f64, probes: usize, seed: u64) -> Result<RefinementReport> {
    let opts = DsmcOptions::default();
    let mut coarse = KineticSolution::sample(spec, particles, ell, seed, opts)?;
    let snap_c = coarse.run_to(t, dt, &SnapshotOptions { probes, ..SnapshotOptions::default() })?.clone();
    let h = snap_c.bandwidth;
    let mut fine = KineticSolution::sample(spec, 2 * particles, ell, seed.wrapping_add(1), opts)?;
    let snap_f = fine.run_to(t, dt, &SnapshotOptions { probes: 1, bandwidth: Some(h / 2.0), ..SnapshotOptions::default() })?.clone();
    let mut rng = stream(seed ^ 0xabcd, 0);
    let mut change = Vec::with_capacity(probes);
    let mut bias = Vec::with_capacity(probes);
    for _ in 0..probes {
        let (x, v) = spec.sample(&mut rng);
        let x: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + b * t).collect();
        let mut z = x;
        z.extend_from_slice(&v);
        let a = snap_c.kde(&z, h);
        let b = snap_c.kde(&z, h / 2.0);
        let c = snap_f.kde(&z, h / 2.0);
        change.push((a.value - c.value).abs());
        bias.push(4.0 / 3.0 * (a.value - b.value).abs());
    }
    let mean_change = Estimate::from_samples(&change).mean;
    let mean_bias = Estimate::from_samples(&bias).mean;
    Ok(RefinementReport { bandwidth: h, mean_change, mean_bias, consistent: mean_change < 2.0 * mean_bias })
}

/// Spatially homogeneous particles with velocities `N(0, T I)`.
pub fn homogeneous_maxwellian(dim: usize, particles: usize, temperature: f64, seed: u64) -> Result<KineticSolution> {
    let mut rng = stream(seed, 0);
    let v = gaussian_vec(&mut rng, dim * particles, temperature.sqrt());
    let opts = DsmcOptions { homogeneous: true, ..DsmcOptions::default() };
    KineticSolution::from_particles(dim, vec![0.0; dim * particles], v, 1.0, seed, opts)
}

/// Homogeneous bimodal data: beams `+-a e_1` with thermal spread `sigma`.
pub fn homogeneous_bimodal(dim: usize, particles: usize, a: f64, sigma: f64, seed: u64) -> Result<KineticSolution> {
    let mut rng = stream(seed, 0);
    let mut v = gaussian_vec(&mut rng, dim * particles, sigma);
    for (i, c) in v.chunks_mut(dim).enumerate() {
        c[0] += if i % 2 == 0 { a } else { -a };
    }
    let opts = DsmcOptions { homogeneous: true, ..DsmcOptions::default() };
    KineticSolution::from_particles(dim, vec![0.0; dim * particles], v, 1.0, seed, opts)
}

/// `|int |v|^4 f - d(d+2) T^2|` where `T` is the temperature of the same
/// energy and momentum.
pub fn fourth_moment_gap(m: &Moments, dim: usize) -> f64 {
    let d = dim as f64;
    let drift = 0.5 * norm2(&m.momentum);
    let temp = 2.0 * (m.energy - drift) / d;
    (m.fourth - d * (d + 2.0) * temp * temp).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::kendall_tau;

    #[test]
    fn cross_sections() {
        // sigma_d = int [omega . e]_+ by quadrature on the circle.
        let n = 100_000;
        let q: f64 = (0..n).map(|i| (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos().max(0.0)).sum::<f64>() * 2.0 * std::f64::consts::PI / n as f64;
        assert!((q - cross_section(2)).abs() < 1e-8);
        assert_eq!(cross_section(3), std::f64::consts::PI);
    }

    #[test]
    fn impact_density_is_cosine() {
        let mut rng = stream(1, 0);
        let u = [1.0, 0.0];
        // E|omega . u| under density |cos| / 4 on the circle is pi / 4.
        let n = 200_000;
        let m: f64 = (0..n).map(|_| sample_impact(&mut rng, &u)[0].abs()).sum::<f64>() / n as f64;
        assert!((m - std::f64::consts::PI / 4.0).abs() < 5e-3, "{m}");
    }

    #[test]
    fn collisions_conserve_exactly() {
        let mut sol = homogeneous_maxwellian(2, 4000, 1.0, 3).unwrap();
        let m0 = sol.moments();
        for _ in 0..20 {
            sol.step(0.05).unwrap();
        }
        assert!(sol.events() > 0);
        assert!(sol.moments().conserved_drift(&m0) < 1e-12);
    }

    #[test]
    fn oversized_steps_are_rejected() {
        let mut sol = homogeneous_maxwellian(2, 1000, 1.0, 3).unwrap();
        assert!(sol.step(10.0).is_err());
    }

    #[test]
    fn bimodal_data_relax() {
        let mut sol = homogeneous_bimodal(2, 20_000, 1.5, 0.3, 4).unwrap();
        let mut gaps = Vec::new();
        let mut times = Vec::new();
        for k in 0..40 {
            sol.step(0.05).unwrap();
            gaps.push(fourth_moment_gap(&sol.moments(), 2));
            times.push(k as f64);
        }
        assert!(kendall_tau(&times, &gaps) < -0.9);
    }

    #[test]
    fn evaluator_matches_initial_density_and_tensorizes() {
        let spec = DensitySpec::reference(2);
        let mut sol = KineticSolution::sample(&spec, 5000, 1.0, 7, DsmcOptions::default()).unwrap();
        sol.run_to(0.0, 0.1, &SnapshotOptions { probes: 10, cv_points: 400, ..SnapshotOptions::default() }).unwrap();
        let (x, v) = ([0.3, -0.2], [0.5, 0.1]);
        assert_eq!(sol.evaluate_f(0.0, &x, &v).unwrap(), spec.density(&x, &v));
        let z = Configuration::new(2, 0.01, x.to_vec(), v.to_vec()).unwrap();
        assert_eq!(sol.tensor_power(0.0, &z).unwrap(), sol.evaluate_f(0.0, &x, &v).unwrap());
        assert!(matches!(sol.evaluate_f(0.5, &x, &v), Err(Error::NotStored(_))));
    }
}
