//! Strong one-sided chaos: the sets `K_s` and `U_s^eta`, the seminorm on
//! `V_s^k(T')`, the duality bracket, and the propagation experiment on the
//! example family.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boltzmann::{cross_section, DsmcOptions, KineticSolution, SnapshotOptions};
use crate::dual::{evaluate, singular_membership, ObservableSpec};
use crate::dynamics::{backward_free_noncolliding, flow, Configuration, FlowOptions};
use crate::ensembles::{ordered_tuples, sample_conditioned, DensityKind, DensitySpec, SamplerOptions};
use crate::error::{Error, Result};
use crate::pseudo::{build_with, duhamel_point_value, random_trajectory, sample_parametrization, v_chain_count, DataSource, DuhamelOptions};
use crate::rng::{gaussian_vec, stream};
use crate::stats::{kendall_tau, Estimate};
use crate::vecops::{ball_volume, norm2};

/// `inf_{i<j} |v_i - v_j| > eta`.
pub fn indicator_u(z: &Configuration, eta: f64) -> bool {
    let s = z.count();
    for i in 0..s {
        for j in i + 1..s {
            let d2: f64 = z.velocity(i).iter().zip(z.velocity(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= eta * eta {
                return false;
            }
        }
    }
    true
}

/// `Z in K_s`: the backward flow is free for all positive times.
pub fn indicator_k(z: &Configuration) -> bool {
    backward_free_noncolliding(z)
}

/// Parameters of `||.||_{eps,s,k,eta,T',R}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeminormSpec {
    pub eps: f64,
    pub s: usize,
    pub k: usize,
    pub eta: f64,
    pub t_prime: f64,
    pub r: f64,
}

impl SeminormSpec {
    pub fn new(eps: f64, s: usize, k: usize, eta: f64, t_prime: f64, r: f64) -> Result<Self> {
        if !(eps > 0.0) || s == 0 || k >= s || !(eta >= 0.0) || !(t_prime > 0.0) || !(r > 0.0) {
            return Err(Error::invalid("seminorm needs eps, T', R > 0, eta >= 0 and 0 <= k < s"));
        }
        Ok(Self { eps, s, k, eta, t_prime, r })
    }

    /// `eta = sqrt(eps)`.
    pub fn preset(eps: f64, s: usize, k: usize, t_prime: f64, r: f64) -> Result<Self> {
        Self::new(eps, s, k, eps.sqrt(), t_prime, r)
    }

    /// `1_{K_s} 1_{U_s^eta} 1_{E_s + I_s <= R^2}`.
    pub fn admits(&self, z: &Configuration) -> bool {
        z.energy() + z.inertia() <= self.r * self.r && indicator_u(z, self.eta) && indicator_k(z)
    }
}

/// Extra proposal mass on a ball of the phase space `R^{2ds}`, positions
/// first; used for `k = 0` when the oracle is concentrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Focus {
    pub center: Vec<f64>,
    pub radius: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormOptions {
    pub samples: usize,
    pub seed: u64,
    /// Gaussian proposal `N(0, 1/beta)` per coordinate.
    pub proposal_beta: f64,
    pub focus: Option<Focus>,
    pub search_budget: usize,
}

impl SeminormOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self { samples, seed, proposal_beta: 0.5, focus: None, search_budget: 10_000 }
    }
}

/// A proposal point with its importance weight; the seminorm is the mean of
/// `weight * |oracle(z)|`.
#[derive(Debug, Clone)]
pub struct SeminormPoint {
    pub z: Configuration,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeminormEstimate {
    pub estimate: Estimate,
    pub probes: usize,
    pub failures: usize,
    /// Draws outside the filters or the phase space.
    pub filtered: usize,
}

fn gaussian_density(x2: f64, n: usize, sig: f64) -> f64 {
    (-x2 / (2.0 * sig * sig)).exp() / (2.0 * std::f64::consts::PI * sig * sig).powf(n as f64 / 2.0)
}

/// Proposal draws for the seminorm. For `k >= 1` the points are endpoints of
/// the pseudo-trajectory parametrization with horizon `T'`, weighted by
/// `|b| / (n_V q)`; the `eps^{k(d-1)}` of the volume element cancels the
/// seminorm's prefactor.
pub fn seminorm_points(spec: &SeminormSpec, dim: usize, opts: &SeminormOptions) -> Result<Vec<SeminormPoint>> {
    let s = spec.s;
    let n = 2 * dim * s;
    if let Some(f) = &opts.focus {
        if f.center.len() != n || !(f.radius > 0.0) || !(0.0..1.0).contains(&f.weight) {
            return Err(Error::invalid("focus ball must live in R^{2ds} with weight in [0, 1)"));
        }
    }
    let sig = 1.0 / opts.proposal_beta.sqrt();
    let pts = (0..opts.samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(opts.seed, m as u64);
            let empty = || SeminormPoint { z: Configuration::empty(dim, spec.eps), weight: 0.0 };
            if spec.k == 0 {
                let phase = match &opts.focus {
                    Some(f) if rng.random::<f64>() < f.weight => {
                        let dir = crate::rng::unit_sphere(&mut rng, n);
                        let r = f.radius * rng.random::<f64>().powf(1.0 / n as f64);
                        f.center.iter().zip(&dir).map(|(c, u)| c + r * u).collect()
                    }
                    _ => gaussian_vec(&mut rng, n, sig),
                };
                let mut q = gaussian_density(norm2(&phase), n, sig);
                if let Some(f) = &opts.focus {
                    let inside = phase.iter().zip(&f.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= f.radius * f.radius;
                    let ball = if inside { 1.0 / (ball_volume(n) * f.radius.powi(n as i32)) } else { 0.0 };
                    q = (1.0 - f.weight) * q + f.weight * ball;
                }
                let Ok(z) = Configuration::new(dim, spec.eps, phase[..n / 2].to_vec(), phase[n / 2..].to_vec()) else {
                    return empty();
                };
                let w = if spec.admits(&z) { 1.0 / q } else { 0.0 };
                return SeminormPoint { z, weight: w };
            }
            let (root, records, q) = sample_parametrization(&mut rng, s, spec.k, spec.t_prime, dim, spec.eps, opts.proposal_beta);
            let Some(root) = root else { return empty() };
            let Ok(pt) = build_with(&root, spec.t_prime, &records, &FlowOptions { record_events: false, ..FlowOptions::strict() }) else {
                return empty();
            };
            let Some(end) = pt.endpoint() else { return empty() };
            if !spec.admits(end) {
                return SeminormPoint { z: end.clone(), weight: 0.0 };
            }
            match v_chain_count(end, spec.k, spec.t_prime, opts.search_budget) {
                Ok(c) if c.count > 0 => SeminormPoint { z: end.clone(), weight: pt.kernel_product().abs() / (c.count as f64 * q) },
                _ => SeminormPoint { z: end.clone(), weight: 0.0 },
            }
        })
        .collect();
    Ok(pts)
}

/// Seminorm from oracle values at the proposal points (`None` = failure).
pub fn seminorm_from_values(points: &[SeminormPoint], values: &[Option<f64>]) -> Result<SeminormEstimate> {
    if points.len() != values.len() {
        return Err(Error::invalid("one value per proposal point"));
    }
    let probes = points.iter().filter(|p| p.weight > 0.0).count();
    let failures = points.iter().zip(values).filter(|(p, v)| p.weight > 0.0 && v.is_none()).count();
    if probes > 0 && failures * 100 > probes {
        return Err(Error::UnreliableOracle { failed: failures, probes });
    }
    let xs: Vec<f64> = points.iter().zip(values).map(|(p, v)| if p.weight > 0.0 { p.weight * v.unwrap_or(0.0).abs() } else { 0.0 }).collect();
    Ok(SeminormEstimate { estimate: Estimate::from_samples(&xs), probes, failures, filtered: points.len() - probes })
}

/// `||f||_{eps,s,k,eta,T',R}` for a pointwise oracle.
pub fn seminorm<F>(oracle: F, spec: &SeminormSpec, dim: usize, opts: &SeminormOptions) -> Result<SeminormEstimate>
where
    F: Fn(&Configuration) -> Result<f64> + Sync,
{
    let points = seminorm_points(spec, dim, opts)?;
    let values: Vec<Option<f64>> = points.par_iter().map(|p| if p.weight > 0.0 { oracle(&p.z).ok() } else { Some(0.0) }).collect();
    seminorm_from_values(&points, &values)
}

/// `C(s, k, T', R)`: the seminorm of the constant 1, so that
/// `||f|| <= C sup |f|`.
pub fn seminorm_constant(spec: &SeminormSpec, dim: usize, opts: &SeminormOptions) -> Result<Estimate> {
    Ok(seminorm(|_| Ok(1.0), spec, dim, opts)?.estimate)
}

/// Both sides of `<Phi_N, F_N>` with a product density conditioned on `D_N`.
#[derive(Debug, Clone)]
pub struct BracketSpec {
    pub observable: ObservableSpec,
    pub data: DensitySpec,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BracketOptions {
    pub runs: usize,
    pub observable_seed: u64,
    pub data_seed: u64,
    pub sampler: SamplerOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityResidual {
    /// `<Phi_N(t), F_N(0)>`.
    pub observable_side: Estimate,
    /// `<Phi_N(0), F_N(t)>`.
    pub data_side: Estimate,
    pub residual: f64,
    pub combined_stderr: f64,
    /// Draws redrawn because of a null-set event.
    pub resampled: usize,
}

impl DualityResidual {
    pub fn within(&self, sigmas: f64) -> bool {
        self.residual.abs() <= sigmas * self.combined_stderr
    }
}

/// `sum_s 1/s! (N-s)!/N! sum_{tuples} phi^(s)(t, Z_tuple)` for one configuration.
pub fn bracket_density(spec: &ObservableSpec, t: f64, z: &Configuration) -> Result<f64> {
    let n = z.count();
    let mut total = 0.0;
    let mut fact = 1.0;
    for s in 1..=n {
        fact *= s as f64;
        let tuples = ordered_tuples(n, s);
        let mut acc = 0.0;
        for tup in &tuples {
            acc += evaluate(spec, t, &z.select(tup))?.0;
        }
        total += acc / tuples.len() as f64 / fact;
    }
    Ok(total)
}

/// `<Phi_N(t), F_N(0)> - <Phi_N(0), F_N(t)>` by two independent ensembles.
/// At `t = 0` both sides use the same draws and agree exactly.
pub fn duality_residual(spec: &BracketSpec, t: f64, opts: &BracketOptions) -> Result<DualityResidual> {
    let n = spec.observable.n as usize;
    if !(t >= 0.0) {
        return Err(Error::invalid("t must be non-negative"));
    }
    let side = |seed: u64, flow_data: bool| -> Result<(Estimate, usize)> {
        let out: Vec<Result<(f64, usize)>> = (0..opts.runs)
            .into_par_iter()
            .map(|m| {
                let mut redraws = 0;
                let mut rng = stream(seed, m as u64);
                loop {
                    let (z, _) = sample_conditioned(&spec.data, n, spec.eps, &mut rng, &opts.sampler)?;
                    let value = if flow_data {
                        if t == 0.0 { Ok(z) } else { flow(&z, t).map(|r| r.final_state) }.and_then(|zt| bracket_density(&spec.observable, 0.0, &zt))
                    } else {
                        bracket_density(&spec.observable, t, &z)
                    };
                    match value {
                        Ok(v) => return Ok((v, redraws)),
                        Err(e) if e.is_degenerate() && redraws < 100 => redraws += 1,
                        Err(e) => return Err(e),
                    }
                }
            })
            .collect();
        let mut vals = Vec::with_capacity(out.len());
        let mut redraws = 0;
        for r in out {
            let (v, k) = r?;
            vals.push(v);
            redraws += k;
        }
        Ok((Estimate::from_samples(&vals), redraws))
    };
    let (obs, r1) = side(opts.observable_seed, false)?;
    let data_seed = if t == 0.0 { opts.observable_seed } else { opts.data_seed };
    let (dat, r2) = side(data_seed, true)?;
    let residual = obs.mean - dat.mean;
    let combined = if t == 0.0 { 0.0 } else { (obs.stderr.powi(2) + dat.stderr.powi(2)).sqrt() };
    Ok(DualityResidual { observable_side: obs, data_side: dat, residual, combined_stderr: combined, resampled: r1 + r2 })
}

/// Short-time window from `nu_max T_L = 1/2`, with the constant of the
/// shape `T_L = C_d ell e^{mu} beta^{(d+1)/2}` read back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LanfordWindow {
    pub nu_max: f64,
    pub t_l: f64,
    pub c_d: f64,
}

/// `nu_max = ell^{-1} sigma_d rho(0) sup_{|v|^2 <= 2R^2} int |v - v_2| f`,
/// with the spatial density peak taken at the origin.
pub fn lanford_window(spec: &DensitySpec, ell: f64, r: f64, samples: usize, seed: u64) -> LanfordWindow {
    let d = spec.dim;
    let mut rng = stream(seed, 0);
    let origin = vec![0.0; d];
    let mut rho = 0.0;
    let mut speed = 0.0;
    let mut top = vec![0.0; d];
    top[0] = (2.0 * r * r).sqrt();
    for _ in 0..samples {
        let w = gaussian_vec(&mut rng, d, 1.0);
        rho += spec.density(&origin, &w) / gaussian_density(norm2(&w), d, 1.0);
        let (_, v2) = spec.sample(&mut rng);
        speed += top.iter().zip(&v2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    rho /= samples as f64;
    speed /= samples as f64;
    let nu_max = cross_section(d) * rho * speed / ell;
    let t_l = 0.5 / nu_max;
    let c_d = t_l / (ell * spec.mu0.exp() * spec.beta0.powf((d as f64 + 1.0) / 2.0));
    LanfordWindow { nu_max, t_l, c_d }
}

/// Rates at which constructed `V_s^k(T)` members, and their velocity
/// reversals, are found in `W_s^k(T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReversalRates {
    pub forward: f64,
    pub reversed: f64,
    pub samples: usize,
}

pub fn reversal_rates(root_count: usize, k: usize, horizon: f64, dim: usize, eps: f64, samples: usize, seed: u64) -> Result<ReversalRates> {
    let s = root_count + k;
    let hits: Vec<Result<(bool, bool)>> = (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(seed, m as u64);
            loop {
                let pt = random_trajectory(&mut rng, root_count, k, horizon, dim, eps)?;
                let end = pt.endpoint().expect("random trajectories are defined").clone();
                let rev = end.flip_velocities();
                match (singular_membership(&end, k, horizon, s as u64), singular_membership(&rev, k, horizon, s as u64)) {
                    (Ok(a), Ok(b)) => return Ok((a, b)),
                    (Err(e), _) | (_, Err(e)) if e.is_degenerate() => continue,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
        })
        .collect();
    let mut f = 0;
    let mut r = 0;
    for h in hits {
        let (a, b) = h?;
        f += a as usize;
        r += b as usize;
    }
    Ok(ReversalRates { forward: f as f64 / samples as f64, reversed: r as f64 / samples as f64, samples })
}

/// Grid of the propagation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosConfig {
    pub dim: usize,
    pub ell: f64,
    pub ns: Vec<u64>,
    /// Output times as fractions of `T_L`.
    pub time_fractions: Vec<f64>,
    pub depth: usize,
    pub outer_samples: usize,
    pub inner_samples: usize,
    pub r: f64,
    pub t_prime: f64,
    pub dsmc_particles: usize,
    pub dsmc_dt: f64,
    pub seed: u64,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            ell: 1.0,
            ns: (7..=12).map(|p| 1u64 << p).collect(),
            time_fractions: vec![0.0, 0.5],
            depth: 3,
            outer_samples: 20_000,
            inner_samples: 32,
            r: 2.0,
            t_prime: 1.0,
            dsmc_particles: 200_000,
            dsmc_dt: 0.01,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosRow {
    pub n: u64,
    pub epsilon: f64,
    pub ell: f64,
    pub s: usize,
    pub k: usize,
    pub eta: f64,
    pub t_prime: f64,
    pub r: f64,
    pub t: f64,
    pub n_depth: usize,
    pub seminorm: f64,
    pub stderr: f64,
    /// Truncation tail bound of the Duhamel series, in seminorm units.
    pub tail: f64,
    pub inconclusive: bool,
    /// Closed-form restricted `L^1` distance at `t = 0`.
    pub closed_form: Option<f64>,
    pub failures: usize,
    pub recollision_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupGapRow {
    pub n: u64,
    pub t: f64,
    pub sup_gap: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosReport {
    pub window: LanfordWindow,
    pub rows: Vec<ChaosRow>,
    pub sup_gaps: Vec<SupGapRow>,
    /// `-tau(N, seminorm)` per output time.
    pub trend: Vec<(f64, f64)>,
    /// `(seminorm at the last time, budget)` for the largest `N`.
    pub budget: Option<(f64, f64)>,
    pub dsmc_bias: Vec<(f64, f64)>,
}

impl ChaosReport {
    pub fn trend_at(&self, t: f64) -> Option<f64> {
        self.trend.iter().find(|(tt, _)| (tt - t).abs() < 1e-12).map(|p| p.1)
    }
}

/// Seminorm of `f_N^(1)(t) - f(t)` along `N` with `ell` fixed, for the
/// example family against the Gaussian reference solution.
///
/// Proposal points and inner Duhamel draws are shared across `N`, so the
/// trend in `N` is not masked by independent noise.
pub fn chaos_experiment(cfg: &ChaosConfig) -> Result<ChaosReport> {
    let d = cfg.dim;
    if cfg.ns.is_empty() || cfg.time_fractions.is_empty() {
        return Err(Error::invalid("empty chaos grid"));
    }
    let reference = DensitySpec::reference(d);
    let window = lanford_window(&reference, cfg.ell, cfg.r, 200_000, cfg.seed);
    let times: Vec<f64> = cfg.time_fractions.iter().map(|f| f * window.t_l).collect();
    let mut sol = KineticSolution::sample(&reference, cfg.dsmc_particles, cfg.ell, cfg.seed ^ 0xd5c, DsmcOptions::default())?;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let mut dsmc_bias = Vec::new();
    for &t in &sorted {
        if sol.at(t).is_err() {
            let snap = sol.run_to(t, cfg.dsmc_dt, &SnapshotOptions::default())?;
            dsmc_bias.push((t, snap.bias));
        }
    }
    let families: Vec<DensitySpec> = cfg.ns.iter().map(|&n| DensitySpec::example_family(d, n)).collect::<Result<_>>()?;
    let rmax = families
        .iter()
        .filter_map(|f| if let DensityKind::ExampleFamily(fam) = &f.kind { Some(fam.radius) } else { None })
        .fold(0.0, f64::max);
    let mut p = vec![0.0; 2 * d];
    p[0] = 1.0;
    let tmax = times.iter().copied().fold(0.0, f64::max);
    let focus = Focus { center: p.clone(), radius: rmax * (2.0 + tmax) + 0.1, weight: 0.5 };
    let q = |t: f64| t / window.t_l;
    let mut rows = Vec::new();
    let mut sup_gaps = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        // One set of proposal points for all N; eps only enters the
        // pseudo-trajectories, so the points are drawn at the largest N.
        let base_spec = SeminormSpec::preset(1.0 / (*cfg.ns.iter().max().expect("non-empty") as f64 * cfg.ell), 1, 0, cfg.t_prime, cfg.r)?;
        let opts = SeminormOptions { samples: cfg.outer_samples, seed: cfg.seed.wrapping_add(ti as u64), proposal_beta: 1.0, focus: Some(focus.clone()), search_budget: 0 };
        let points = seminorm_points(&base_spec, d, &opts)?;
        let snap = sol.at(t)?.clone();
        let f_ref: Vec<f64> = points.par_iter().map(|pt| if pt.weight > 0.0 { snap.tensor_power(&pt.z) } else { 0.0 }).collect();
        for (ni, &n) in cfg.ns.iter().enumerate() {
            let eps = 1.0 / (n as f64 * cfg.ell).powf(1.0 / (d as f64 - 1.0));
            let spec = SeminormSpec::preset(eps, 1, 0, cfg.t_prime, cfg.r)?;
            let data = DataSource::Tensorized(families[ni].clone());
            let depth = if t == 0.0 { 0 } else { cfg.depth };
            let duhamel = DuhamelOptions { vmax: Some(2.0 * cfg.r), exclude_recollisions: true, ..DuhamelOptions::new(n, depth, cfg.inner_samples, cfg.seed ^ 0xdu64) };
            let evals: Vec<Option<(f64, f64, usize)>> = points
                .par_iter()
                .zip(&f_ref)
                .map(|(pt, fr)| {
                    if pt.weight == 0.0 {
                        return Some((0.0, 0.0, 0));
                    }
                    let z = pt.z.with_diameter(eps);
                    let est = duhamel_point_value(&z, t, &data, &duhamel).ok()?;
                    let last = est.terms.last().map_or(0.0, |e| e.mean.abs());
                    let tail = if depth > 0 && q(t) < 1.0 { last * q(t) / (1.0 - q(t)) } else { 0.0 };
                    Some((est.value - fr, tail, est.recollision_excluded))
                })
                .collect();
            let values: Vec<Option<f64>> = evals.iter().map(|e| e.map(|x| x.0)).collect();
            let sn = seminorm_from_values(&points, &values)?;
            let tails: Vec<f64> = points.iter().zip(&evals).map(|(p, e)| p.weight * e.map_or(0.0, |x| x.1)).collect();
            let tail = Estimate::from_samples(&tails).mean;
            let excluded = evals.iter().map(|e| e.map_or(0, |x| x.2)).sum();
            let closed_form = if t == 0.0 { families[ni].restricted_l1_distance_to_reference(2.0 * cfg.r * cfg.r) } else { None };
            rows.push(ChaosRow {
                n,
                epsilon: eps,
                ell: cfg.ell,
                s: 1,
                k: 0,
                eta: spec.eta,
                t_prime: cfg.t_prime,
                r: cfg.r,
                t,
                n_depth: depth,
                seminorm: sn.estimate.mean,
                stderr: sn.estimate.stderr,
                tail,
                inconclusive: tail > 0.1 * sn.estimate.mean,
                closed_form,
                failures: sn.failures,
                recollision_excluded: excluded,
            });
            // Sup gap at the free image of the bump centre.
            if let DensityKind::ExampleFamily(fam) = &families[ni].kind {
                let x: Vec<f64> = (0..d).map(|k| fam.center[k] + fam.center[d + k] * t).collect();
                let v = fam.center[d..].to_vec();
                let z = Configuration::new(d, eps, x, v)?;
                let fn_t = duhamel_point_value(&z, t, &data, &DuhamelOptions { samples: 4 * cfg.inner_samples, ..duhamel })?.value;
                let gap = (fn_t - snap.tensor_power(&z)).abs();
                let gap = if t == 0.0 { gap.max(families[ni].sup_gap_to_reference().unwrap_or(0.0)) } else { gap };
                sup_gaps.push(SupGapRow { n, t, sup_gap: gap, threshold: fam.h0 / 2.0 });
            }
        }
    }
    let mut trend = Vec::new();
    for &t in &times {
        let sel: Vec<&ChaosRow> = rows.iter().filter(|r| r.t == t).collect();
        let ns: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
        let vals: Vec<f64> = sel.iter().map(|r| r.seminorm).collect();
        trend.push((t, if ns.len() > 1 { -kendall_tau(&ns, &vals) } else { 0.0 }));
    }
    let budget = budget_check(&rows, window.nu_max);
    Ok(ChaosReport { window, rows, sup_gaps, trend, budget, dsmc_bias })
}

/// For the largest `N`: the seminorm at the last time against
/// `seminorm(0) e^{2 nu t} + tail + 3 stderr`.
fn budget_check(rows: &[ChaosRow], nu: f64) -> Option<(f64, f64)> {
    let nmax = rows.iter().map(|r| r.n).max()?;
    let at0 = rows.iter().find(|r| r.n == nmax && r.t == 0.0)?;
    let last = rows.iter().filter(|r| r.n == nmax).max_by(|a, b| a.t.total_cmp(&b.t))?;
    if last.t == 0.0 {
        return None;
    }
    let se = (at0.stderr.powi(2) + last.stderr.powi(2)).sqrt();
    Some((last.seminorm, at0.seminorm * (2.0 * nu * last.t).exp() + last.tail + 3.0 * se))
}

/// `N,epsilon,ell,s,k,eta,Tprime,R,t,n_depth,seminorm,stderr,flag`.
pub fn chaos_csv(rows: &[ChaosRow]) -> String {
    let mut out = String::from("N,epsilon,ell,s,k,eta,Tprime,R,t,n_depth,seminorm,stderr,flag\n");
    for r in rows {
        let flag = if r.inconclusive { "inconclusive" } else { "ok" };
        let _ = writeln!(
            out,
            "{},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{},{:?},{:?},{flag}",
            r.n, r.epsilon, r.ell, r.s, r.k, r.eta, r.t_prime, r.r, r.t, r.n_depth, r.seminorm, r.stderr
        );
    }
    out
}

/// `N,t,sup_gap,threshold`.
pub fn sup_gap_csv(rows: &[SupGapRow]) -> String {
    let mut out = String::from("N,t,sup_gap,threshold\n");
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", r.n, r.t, r.sup_gap, r.threshold);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{Hierarchy, LevelData};
    use crate::ensembles::GaussianComponent;

    #[test]
    fn u_filter() {
        let one = Configuration::new(2, 0.1, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert!(indicator_u(&one, 10.0));
        let two = Configuration::new(2, 0.1, vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(indicator_u(&two, 0.5));
        let same = Configuration::new(2, 0.1, vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(!indicator_u(&same, 1e-9));
    }

    #[test]
    fn filters_commute_with_permutations() {
        let mut rng = stream(4, 0);
        for _ in 0..200 {
            let z = crate::dual::random_probe(&mut rng, 3, 2, 0.2, 0.8);
            for p in crate::pseudo::permutations(3) {
                let w = z.permuted(&p);
                assert_eq!(indicator_u(&z, 0.7), indicator_u(&w, 0.7));
                assert_eq!(indicator_k(&z), indicator_k(&w));
            }
        }
    }

    #[test]
    fn zero_oracle_has_zero_seminorm() {
        let spec = SeminormSpec::preset(0.01, 2, 1, 1.0, 2.0).unwrap();
        let e = seminorm(|_| Ok(0.0), &spec, 2, &SeminormOptions::new(200, 1)).unwrap();
        assert_eq!(e.estimate.mean, 0.0);
        assert_eq!(e.estimate.stderr, 0.0);
    }

    #[test]
    fn constant_oracle_k0_matches_rejection_sampling() {
        // s = 2, k = 0: c times the volume of K cap U cap ball. Independent
        // oracle: uniform rejection sampling in the cube [-L, L]^8.
        let spec = SeminormSpec::new(0.1, 2, 0, 0.3, 1.0, 1.2).unwrap();
        let c = 0.7;
        let est = seminorm(|_| Ok(c), &spec, 2, &SeminormOptions::new(200_000, 2)).unwrap().estimate;
        let l = (2.0f64).sqrt() * spec.r;
        let n = 400_000;
        let hits: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|m| {
                let mut rng = stream(99, m as u64);
                let p: Vec<f64> = (0..8).map(|_| l * (2.0 * rng.random::<f64>() - 1.0)).collect();
                match Configuration::new(2, spec.eps, p[..4].to_vec(), p[4..].to_vec()) {
                    Ok(z) if spec.admits(&z) => 1.0,
                    _ => 0.0,
                }
            })
            .collect();
        let vol = (2.0 * l).powi(8);
        let oracle = Estimate::from_samples(&hits).scaled(vol * c);
        assert!(est.z_distance(&oracle) < 3.0, "{est:?} vs {oracle:?}");
    }

    #[test]
    fn seminorm_is_homogeneous_and_subadditive() {
        let spec = SeminormSpec::preset(0.05, 2, 1, 1.0, 2.0).unwrap();
        let opts = SeminormOptions::new(2000, 3);
        let f = |z: &Configuration| Ok(z.velocity(0)[0].sin());
        let g = |z: &Configuration| Ok((z.position(1)[1] * 2.0).cos() - 0.3);
        let a = seminorm(f, &spec, 2, &opts).unwrap().estimate.mean;
        let b = seminorm(g, &spec, 2, &opts).unwrap().estimate.mean;
        let scaled = seminorm(|z| Ok(-2.5 * f(z)?), &spec, 2, &opts).unwrap().estimate.mean;
        let sum = seminorm(|z| Ok(f(z)? + g(z)?), &spec, 2, &opts).unwrap().estimate.mean;
        assert!((scaled - 2.5 * a).abs() <= 1e-12 * scaled.abs());
        assert!(sum <= a + b + 1e-12);
        let c = seminorm_constant(&spec, 2, &opts).unwrap().mean;
        assert!(a <= c && b <= c * 1.3);
    }

    #[test]
    fn failing_oracle_is_reported() {
        let spec = SeminormSpec::new(0.1, 1, 0, 0.0, 1.0, 2.0).unwrap();
        let r = seminorm(|z| if z.velocity(0)[0] > 0.0 { Err(Error::degenerate("x")) } else { Ok(1.0) }, &spec, 2, &SeminormOptions::new(500, 4));
        assert!(matches!(r, Err(Error::UnreliableOracle { .. })));
    }

    #[test]
    fn trivial_observable_brackets_agree() {
        let data = DensitySpec::gaussian_mixture(2, vec![GaussianComponent::standard(2)]).unwrap();
        let spec = BracketSpec { observable: ObservableSpec::all_ones(3, Hierarchy::Dual), data, eps: 0.2 };
        let opts = BracketOptions { runs: 200, observable_seed: 1, data_seed: 2, sampler: SamplerOptions::default() };
        let r = duality_residual(&spec, 0.7, &opts).unwrap();
        // Both sides are exactly 1 + 1/2 + 1/6.
        assert!((r.observable_side.mean - 5.0 / 3.0).abs() < 1e-12);
        assert!(r.residual.abs() < 1e-12);
    }

    #[test]
    fn bracket_at_time_zero_is_identical() {
        let data = DensitySpec::gaussian_mixture(2, vec![GaussianComponent::standard(2)]).unwrap();
        let obs = ObservableSpec::new(3, Hierarchy::Dual).with_level(1, LevelData::indicator(|z: &Configuration| z.velocity(0)[0] > 0.2));
        let spec = BracketSpec { observable: obs, data, eps: 0.2 };
        let opts = BracketOptions { runs: 100, observable_seed: 1, data_seed: 2, sampler: SamplerOptions::default() };
        let r = duality_residual(&spec, 0.0, &opts).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn lanford_window_for_the_reference() {
        let w = lanford_window(&DensitySpec::reference(2), 1.0, 2.0, 100_000, 1);
        // rho(0) = 1/(2 pi); E|v - V| lies between |v| and sqrt(|v|^2 + 2).
        let lo = 2.0 / (2.0 * std::f64::consts::PI) * 8f64.sqrt();
        let hi = 2.0 / (2.0 * std::f64::consts::PI) * 10f64.sqrt();
        assert!(w.nu_max > lo && w.nu_max < hi, "{w:?}");
        assert!((w.nu_max * w.t_l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reversed_members_are_rarely_members() {
        let r = reversal_rates(1, 1, 1.0, 2, 0.1, 300, 5).unwrap();
        assert_eq!(r.forward, 1.0);
        assert!(r.reversed < 0.5 * r.forward, "{r:?}");
    }
}
