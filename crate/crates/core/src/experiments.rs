//! Experiment suites behind the `bglab` subcommands.
//!
//! Every suite is a pure function of its config section and a master seed:
//! it returns CSV bodies and named pass/fail predicates. Writing files and
//! the manifest is left to the caller.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boltzmann::{homogeneous_maxwellian, refinement_check};
use crate::chaos::{chaos_csv, chaos_experiment, duality_residual, sup_gap_csv, BracketOptions, BracketSpec, ChaosConfig};
use crate::dual::{
    evaluate, evaluate_hat, ln_hat_upper_bound, probe_csv, random_probe, singular_membership, Hierarchy, LevelData, ObservableSpec, ProbeRow,
};
use crate::dynamics::{flow, lattice_gas, random_gas, Configuration};
use crate::ensembles::{DensitySpec, GaussianComponent, SamplerOptions};
use crate::error::{Error, Result};
use crate::linalg::{det, fd_jacobian};
use crate::pseudo::{
    jacobian_identity_check, measure_csv, random_trajectory, singular_measure_estimate, singular_measure_indicator, v_set_membership, MeasureOptions,
};
use crate::rng::{stream, SimRng};
use crate::stats::linear_fit;

pub const SUBCOMMANDS: [&str; 6] = ["flow-validate", "duality-check", "hat-probe", "singular-scaling", "jacobian-check", "chaos-run"];

/// One named acceptance predicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Predicate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Predicate {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Result of one suite: CSV artifacts by file name plus predicates.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Outcome {
    pub artifacts: Vec<(String, String)>,
    pub predicates: Vec<Predicate>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.predicates.iter().all(|p| p.passed)
    }

    pub fn predicate(&self, name: &str) -> Option<&Predicate> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.0 == name).map(|a| a.1.as_str())
    }
}

// ---------------------------------------------------------------------------
// flow-validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowValidateConfig {
    pub dims: Vec<usize>,
    /// Lattice sites per side of the dense gas, per dimension in `dims`.
    pub lattice_sides: Vec<usize>,
    pub min_events: usize,
    pub conservation_tol: f64,
    pub reversibility_trials: usize,
    pub max_events: usize,
    pub reversibility_tol: f64,
    pub jacobian_trials: usize,
    pub jacobian_tol: f64,
}

impl Default for FlowValidateConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 3],
            lattice_sides: vec![16, 8],
            min_events: 1000,
            conservation_tol: 1e-10,
            reversibility_trials: 200,
            max_events: 100,
            reversibility_tol: 1e-8,
            jacobian_trials: 20,
            jacobian_tol: 1e-4,
        }
    }
}

fn phase_vector(c: &Configuration) -> Vec<f64> {
    let mut z = c.positions().to_vec();
    z.extend_from_slice(c.velocities());
    z
}

/// Conservation over long dense runs, flip-flow-flip reversibility and the
/// unit determinant of the flow map.
pub fn flow_validate(cfg: &FlowValidateConfig, seed: u64) -> Result<Outcome> {
    if cfg.dims.len() != cfg.lattice_sides.len() || cfg.dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid("flow-validate: dims and lattice_sides must pair up, d >= 2"));
    }
    let mut csv = String::from("check,dim,s,events,error,tolerance,pass\n");
    let mut cons_ok = true;
    let mut fewest = usize::MAX;
    for (di, (&dim, &side)) in cfg.dims.iter().zip(&cfg.lattice_sides).enumerate() {
        let mut rng = stream(seed, di as u64);
        let mut per = side;
        // Grow the lattice until the run reaches the requested collision count.
        let (c, r) = loop {
            let c = lattice_gas(&mut rng, per, dim, 0.1, 0.11)?;
            let r = flow(&c, 5.0)?;
            if r.events.len() >= cfg.min_events || per > 4 * side {
                break (c, r);
            }
            per += 1;
        };
        let e0 = c.energy();
        let de = (r.final_state.energy() - e0).abs() / e0;
        let scale = (2.0 * e0 * c.count() as f64).sqrt();
        let (p0, p1) = (c.momentum(), r.final_state.momentum());
        let dp = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        let n = r.events.len();
        fewest = fewest.min(n);
        for (name, err) in [("energy", de), ("momentum", dp)] {
            let pass = err <= cfg.conservation_tol && n >= cfg.min_events;
            cons_ok &= pass;
            let _ = writeln!(csv, "{name},{dim},{},{n},{err:?},{:?},{pass}", c.count(), cfg.conservation_tol);
        }
    }

    let rev: Vec<Result<Option<(usize, usize, usize, f64)>>> = (0..cfg.reversibility_trials)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(seed ^ 0x7e5, m as u64);
            let dim = cfg.dims[m % cfg.dims.len()];
            let s = rng.random_range(2..=8);
            let c = random_gas(&mut rng, s, dim, 0.2, 1.0);
            let fwd = match flow(&c, 2.0) {
                Ok(r) if r.events.len() <= cfg.max_events => r,
                Ok(_) => return Ok(None),
                Err(e) if e.is_degenerate() => return Ok(None),
                Err(e) => return Err(e),
            };
            let back = flow(&fwd.final_state.flip_velocities(), 2.0)?.final_state.flip_velocities();
            let err = phase_vector(&back).iter().zip(phase_vector(&c)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / (1.0 + c.phase_norm());
            Ok(Some((dim, s, fwd.events.len(), err)))
        })
        .collect();
    let mut rev_ok = true;
    let mut worst_rev = 0.0f64;
    let mut rev_count = 0;
    for r in rev {
        let Some((dim, s, n, err)) = r? else { continue };
        let pass = err <= cfg.reversibility_tol;
        rev_ok &= pass;
        worst_rev = worst_rev.max(err);
        rev_count += 1;
        let _ = writeln!(csv, "reversibility,{dim},{s},{n},{err:?},{:?},{pass}", cfg.reversibility_tol);
    }

    let mut rng = stream(seed ^ 0x1ac, 0);
    let mut jac_ok = true;
    let mut worst_jac = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < cfg.jacobian_trials && attempts < 100 * cfg.jacobian_trials.max(1) {
        attempts += 1;
        let dim = cfg.dims[done % cfg.dims.len()];
        let s = if dim == 2 { 3 } else { 2 };
        let c = random_gas(&mut rng, s, dim, 0.3, 1.0);
        let Ok(r) = flow(&c, 1.0) else { continue };
        let n0 = r.events.len();
        if n0 == 0 {
            continue;
        }
        let sd = s * dim;
        let map = |p: &[f64]| {
            let cc = Configuration::from_parts(dim, 0.3, p[..sd].to_vec(), p[sd..].to_vec())?;
            let out = flow(&cc, 1.0)?;
            if out.events.len() != n0 {
                return Err(Error::degenerate("event count changed"));
            }
            Ok(phase_vector(&out.final_state))
        };
        let Ok(j) = fd_jacobian(&phase_vector(&c), 1e-6, map) else { continue };
        let err = (det(j, 2 * sd).abs() - 1.0).abs();
        let pass = err <= cfg.jacobian_tol;
        jac_ok &= pass;
        worst_jac = worst_jac.max(err);
        done += 1;
        let _ = writeln!(csv, "jacobian,{dim},{s},{n0},{err:?},{:?},{pass}", cfg.jacobian_tol);
    }
    jac_ok &= done == cfg.jacobian_trials;

    Ok(Outcome {
        artifacts: vec![("flow_validate.csv".into(), csv)],
        predicates: vec![
            Predicate::new("conservation", cons_ok, format!("fewest events per run {fewest}, tolerance {:e}", cfg.conservation_tol)),
            Predicate::new("reversibility", rev_ok && rev_count > 0, format!("{rev_count} runs, worst {worst_rev:e}")),
            Predicate::new("flow_jacobian", jac_ok, format!("{done} maps, worst ||det|-1| {worst_jac:e}")),
        ],
    })
}

// ---------------------------------------------------------------------------
// duality-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityConfig {
    pub ns: Vec<u64>,
    pub cells: usize,
    pub runs: usize,
    pub eps: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub sigmas: f64,
    /// Fraction of cells that must fall within `sigmas` combined stderr.
    pub pass_fraction: f64,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self { ns: vec![2, 3, 4], cells: 20, runs: 2000, eps: 0.25, t_min: 0.2, t_max: 1.0, sigmas: 3.0, pass_fraction: 0.95 }
    }
}

/// One random cell: Gaussian-mixture data, a level-one datum (velocity
/// half-plane or a smooth wave) and a level-two proximity indicator.
fn duality_cell(rng: &mut SimRng, n: u64, eps: f64) -> Result<(BracketSpec, String)> {
    let d = 2;
    let ncomp = rng.random_range(1..=2);
    let comps: Vec<GaussianComponent> = (0..ncomp)
        .map(|_| GaussianComponent {
            weight: rng.random_range(0.5..1.0),
            center_x: (0..d).map(|_| rng.random_range(-0.4..0.4)).collect(),
            center_v: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma_x: rng.random_range(0.3..0.5),
            sigma_v: rng.random_range(0.6..1.0),
        })
        .collect();
    let data = DensitySpec::gaussian_mixture(d, comps)?;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (a, b) = (theta.cos(), theta.sin());
    let (level1, label) = if rng.random_bool(0.5) {
        let c = rng.random_range(-0.3..0.3);
        (LevelData::indicator(move |z: &Configuration| a * z.velocity(0)[0] + b * z.velocity(0)[1] > c), "halfplane")
    } else {
        let (k, w, ph) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..std::f64::consts::TAU));
        (LevelData::function(move |z: &Configuration| (k * (a * z.position(0)[0] + b * z.position(0)[1]) + w * z.velocity(0)[0] + ph).cos()), "wave")
    };
    let amp = rng.random_range(0.5..2.0);
    let r = rng.random_range(0.3..0.6);
    let level2 = LevelData::function(move |z: &Configuration| if z.distance2(0, 1) < r * r { amp } else { 0.0 });
    let observable = ObservableSpec::new(n, Hierarchy::Dual).with_level(1, level1).with_level(2, level2);
    Ok((BracketSpec { observable, data, eps }, label.to_string()))
}

/// `<Phi_N(t), F_N(0)> = <Phi_N(0), F_N(t)>` on random cells.
pub fn duality_check(cfg: &DualityConfig, seed: u64) -> Result<Outcome> {
    if cfg.ns.iter().any(|&n| !(2..=5).contains(&n)) || cfg.cells == 0 || cfg.runs < 2 || !(cfg.t_max >= cfg.t_min) {
        return Err(Error::invalid("duality-check: need 2 <= N <= 5, cells > 0, runs > 1, t_min <= t_max"));
    }
    let mut csv = String::from("N,cell,observable,t,observable_side,observable_stderr,data_side,data_stderr,residual,combined_stderr,within\n");
    let mut predicates = Vec::new();
    for &n in &cfg.ns {
        let mut within = 0;
        for cell in 0..cfg.cells {
            let mut rng = stream(seed, (n << 32) + cell as u64);
            let (spec, label) = duality_cell(&mut rng, n, cfg.eps)?;
            let t = rng.random_range(cfg.t_min..=cfg.t_max);
            let opts = BracketOptions { runs: cfg.runs, observable_seed: rng.random(), data_seed: rng.random(), sampler: SamplerOptions::default() };
            let r = duality_residual(&spec, t, &opts)?;
            let ok = r.within(cfg.sigmas);
            within += usize::from(ok);
            let _ = writeln!(
                csv,
                "{n},{cell},{label},{t:?},{:?},{:?},{:?},{:?},{:?},{:?},{ok}",
                r.observable_side.mean, r.observable_side.stderr, r.data_side.mean, r.data_side.stderr, r.residual, r.combined_stderr
            );
        }
        let frac = within as f64 / cfg.cells as f64;
        predicates.push(Predicate::new(&format!("duality_N{n}"), frac >= cfg.pass_fraction, format!("{within}/{} cells within {} sigma", cfg.cells, cfg.sigmas)));
    }
    Ok(Outcome { artifacts: vec![("duality.csv".into(), csv)], predicates })
}

// ---------------------------------------------------------------------------
// hat-probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HatProbeConfig {
    pub n: u64,
    pub probes: usize,
    pub max_level: usize,
    pub eps: f64,
    pub spread: f64,
    pub times: Vec<f64>,
    /// Relative round-off slack for the floating-point inequalities.
    pub slack: f64,
    pub restart_probes: usize,
    pub restart_level: usize,
    pub restart_k: usize,
    pub restart_horizon: f64,
    pub restart_t: f64,
    pub restart_spread: f64,
}

impl Default for HatProbeConfig {
    fn default() -> Self {
        Self {
            n: 10,
            probes: 1000,
            max_level: 4,
            eps: 0.3,
            spread: 0.6,
            times: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            slack: 1e-12,
            restart_probes: 1000,
            restart_level: 2,
            restart_k: 1,
            restart_horizon: 1.0,
            restart_t: 0.25,
            restart_spread: 0.45,
        }
    }
}

/// Random symmetric function `sum_i a cos(k.x_i + w.v_i + c) + b sum_{i<j} exp(-|x_i - x_j|^2)`.
#[derive(Debug, Clone, Copy)]
struct SymmetricWave {
    k: [f64; 2],
    w: [f64; 2],
    c: f64,
    a: f64,
    b: f64,
}

impl SymmetricWave {
    fn random(rng: &mut SimRng) -> Self {
        Self {
            k: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            w: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            c: rng.random_range(0.0..std::f64::consts::TAU),
            a: rng.random_range(-1.0..1.0),
            b: rng.random_range(-1.0..1.0),
        }
    }

    fn eval(&self, z: &Configuration) -> f64 {
        let s = z.count();
        let mut out = 0.0;
        for i in 0..s {
            let (x, v) = (z.position(i), z.velocity(i));
            out += self.a * (self.k[0] * x[0] + self.k[1] * x[1] + self.w[0] * v[0] + self.w[1] * v[1] + self.c).cos();
            for j in i + 1..s {
                out += self.b * (-z.distance2(i, j)).exp();
            }
        }
        out
    }
}

/// Non-negative symmetric bump `h0 + h1 sum_i exp(-|v_i|^2)`.
fn positive_bump(h0: f64, h1: f64) -> impl Fn(&Configuration) -> f64 + Send + Sync + Copy {
    move |z: &Configuration| h0 + h1 * (0..z.count()).map(|i| (-z.velocity(i).iter().map(|c| c * c).sum::<f64>()).exp()).sum::<f64>()
}

struct ComparisonProbe {
    phi: f64,
    hat: f64,
    lower: f64,
    upper: f64,
}

fn comparison_probe(rng: &mut SimRng, n: u64, s: usize, t: f64, z: &Configuration) -> Result<ComparisonProbe> {
    let mut dual = ObservableSpec::new(n, Hierarchy::Dual);
    let mut hat = ObservableSpec::new(n, Hierarchy::Hat);
    let mut upper = ObservableSpec::new(n, Hierarchy::UpperEnvelope);
    let mut lower = ObservableSpec::new(n, Hierarchy::LowerEnvelope);
    for level in 1..=s.min(2) {
        let g = SymmetricWave::random(rng);
        let h = positive_bump(rng.random_range(0.0..0.2), rng.random_range(0.0..0.5));
        let hu = positive_bump(rng.random_range(0.0..0.2), rng.random_range(0.0..0.5));
        let hl = positive_bump(rng.random_range(0.0..0.2), rng.random_range(0.0..0.5));
        let up = LevelData::function(move |z: &Configuration| g.eval(z) + hu(z));
        let lo = LevelData::function(move |z: &Configuration| g.eval(z) - hl(z));
        dual = dual.with_level(level, LevelData::function(move |z: &Configuration| g.eval(z)));
        hat = hat.with_level(level, LevelData::function(move |z: &Configuration| g.eval(z).abs() + h(z)));
        upper = upper.with_level(level, up.clone()).with_companion(level, lo.clone());
        lower = lower.with_level(level, lo).with_companion(level, up);
    }
    Ok(ComparisonProbe {
        phi: evaluate(&dual, t, z)?.0,
        hat: evaluate(&hat, t, z)?.0,
        lower: evaluate(&lower, t, z)?.0,
        upper: evaluate(&upper, t, z)?.0,
    })
}

enum HatProbe {
    Degenerate,
    Done { rows: Vec<ProbeRow>, monotone: bool, consistent: bool, bounded: bool, comparison: ComparisonProbe, cmp_t: f64, cmp_ok: bool, env_ok: bool },
}

fn hat_probe_one(cfg: &HatProbeConfig, seed: u64, m: usize) -> Result<HatProbe> {
    let mut rng = stream(seed, m as u64);
    let s = rng.random_range(2..=cfg.max_level);
    let j = rng.random_range(1..s);
    let z = random_probe(&mut rng, s, 2, cfg.eps, cfg.spread);
    let mut rows = Vec::with_capacity(cfg.times.len());
    let mut prev = 0u128;
    let (mut monotone, mut consistent, mut bounded) = (true, true, true);
    let ln_bound = ln_hat_upper_bound(j, s, cfg.n);
    for &t in &cfg.times {
        let h = match evaluate_hat(j, cfg.n, t, &z) {
            Ok(h) => h,
            Err(e) if e.is_degenerate() => return Ok(HatProbe::Degenerate),
            Err(e) => return Err(e),
        };
        monotone &= h.value >= prev;
        consistent &= h.is_consistent();
        bounded &= h.value == 0 || (h.value as f64).ln() <= ln_bound;
        prev = h.value;
        rows.push(ProbeRow { hierarchy: "hat".into(), j, s, n: cfg.n, t, value_integer_part: h.value, value: h.value as f64, jumps: h.per_jump.len(), resamples: 0 });
    }
    let cmp_t = cfg.times[rng.random_range(0..cfg.times.len())];
    let comparison = match comparison_probe(&mut rng, cfg.n, s, cmp_t, &z) {
        Ok(c) => c,
        Err(e) if e.is_degenerate() => return Ok(HatProbe::Degenerate),
        Err(e) => return Err(e),
    };
    let tol = |a: f64| cfg.slack * (1.0 + a.abs());
    let c = &comparison;
    let cmp_ok = c.phi.abs() <= c.hat + tol(c.hat);
    let env_ok = c.lower <= c.phi + tol(c.phi) && c.phi <= c.upper + tol(c.upper);
    Ok(HatProbe::Done { rows, monotone, consistent, bounded, comparison, cmp_t, cmp_ok, env_ok })
}

/// Restart stability: data `N^k 1_{W_{s1}^k(T)}` at level `s1` evolves to
/// values supported in `W_s^{k+s-s1}(T+t)` and vanishing below `s1`.
fn restart_probe(cfg: &HatProbeConfig, seed: u64) -> Result<(String, usize, usize, usize)> {
    let (s1, k, horizon, n) = (cfg.restart_level, cfg.restart_k, cfg.restart_horizon, cfg.n);
    if k == 0 || k >= s1 {
        return Err(Error::invalid("hat-probe: need 0 < restart_k < restart_level"));
    }
    let set = move |z: &Configuration| singular_membership(z, k, horizon, n).unwrap_or(false);
    let spec = ObservableSpec::new(n, Hierarchy::Hat).with_level(s1, LevelData::ScaledIndicator { power: k as u32, set: std::sync::Arc::new(set) });
    let top = cfg.max_level.min(s1 + 1);
    let out: Vec<Result<Option<(usize, bool, bool, f64)>>> = (0..cfg.restart_probes)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(seed ^ 0x4e5, m as u64);
            let s = rng.random_range(1..=top);
            let z = random_probe(&mut rng, s, 2, cfg.eps, cfg.restart_spread);
            let value = match evaluate(&spec, cfg.restart_t, &z) {
                Ok((v, _)) => v,
                Err(e) if e.is_degenerate() => return Ok(None),
                Err(e) => return Err(e),
            };
            let inside = if s < s1 { false } else { singular_membership(&z, k + s - s1, horizon + cfg.restart_t, n)? };
            Ok(Some((s, inside, value == 0.0 || inside, value)))
        })
        .collect();
    let mut csv = String::from("s,inside,value,pass\n");
    let (mut outside, mut violations, mut nonzero) = (0, 0, 0);
    for r in out {
        let Some((s, inside, ok, value)) = r? else { continue };
        outside += usize::from(!inside);
        violations += usize::from(!ok);
        nonzero += usize::from(value != 0.0);
        let _ = writeln!(csv, "{s},{inside},{value:?},{ok}");
    }
    Ok((csv, outside, violations, nonzero))
}

/// Monotonicity, exact divisibility and the upper bound of the comparison
/// hierarchy, the comparison principle, the envelope sandwich and restart
/// stability.
pub fn hat_probe(cfg: &HatProbeConfig, seed: u64) -> Result<Outcome> {
    if cfg.max_level < 2 || cfg.max_level > crate::tolerances::LEVEL_CAP || cfg.times.is_empty() || cfg.n < cfg.max_level as u64 {
        return Err(Error::invalid("hat-probe: need 2 <= max_level <= cap, N >= max_level and a time grid"));
    }
    if cfg.times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("hat-probe: times must be increasing"));
    }
    // Degenerate probes are replaced by fresh indices beyond the range.
    let mut results = Vec::with_capacity(cfg.probes);
    let mut next = 0usize;
    let mut resamples = 0usize;
    while results.len() < cfg.probes {
        let want = cfg.probes - results.len();
        let batch: Vec<Result<HatProbe>> = (next..next + want).into_par_iter().map(|m| hat_probe_one(cfg, seed, m)).collect();
        next += want;
        for r in batch {
            match r? {
                HatProbe::Degenerate => resamples += 1,
                done => results.push(done),
            }
        }
        if resamples > 10 * cfg.probes.max(10) {
            return Err(Error::degenerate("hat-probe: too many degenerate probes"));
        }
    }
    let mut rows = Vec::new();
    let mut cmp_csv = String::from("probe,s,t,phi,hat,lower,upper,comparison,sandwich\n");
    let (mut mono_bad, mut div_bad, mut bound_bad, mut cmp_bad, mut env_bad) = (0, 0, 0, 0, 0);
    for (i, r) in results.into_iter().enumerate() {
        let HatProbe::Done { rows: r_rows, monotone, consistent, bounded, comparison: c, cmp_t, cmp_ok, env_ok } = r else { unreachable!() };
        mono_bad += usize::from(!monotone);
        div_bad += usize::from(!consistent);
        bound_bad += usize::from(!bounded);
        cmp_bad += usize::from(!cmp_ok);
        env_bad += usize::from(!env_ok);
        let s = r_rows[0].s;
        rows.extend(r_rows);
        let _ = writeln!(cmp_csv, "{i},{s},{cmp_t:?},{:?},{:?},{:?},{:?},{cmp_ok},{env_ok}", c.phi, c.hat, c.lower, c.upper);
    }
    if let Some(r) = rows.first_mut() {
        r.resamples = resamples;
    }
    let (restart_csv, outside, restart_bad, nonzero) = restart_probe(cfg, seed)?;
    let p = cfg.probes;
    Ok(Outcome {
        artifacts: vec![("hat_probe.csv".into(), probe_csv(&rows)), ("comparison.csv".into(), cmp_csv), ("restart.csv".into(), restart_csv)],
        predicates: vec![
            Predicate::new("hat_monotone", mono_bad == 0, format!("{mono_bad}/{p} probes decrease in t")),
            Predicate::new("hat_divisible", div_bad == 0, format!("{div_bad}/{p} probes break exact divisibility")),
            Predicate::new("hat_upper_bound", bound_bad == 0, format!("{bound_bad}/{p} probes exceed the bound")),
            Predicate::new("comparison", cmp_bad == 0, format!("{cmp_bad}/{p} probes with |phi| > phi_hat")),
            Predicate::new("envelope_sandwich", env_bad == 0, format!("{env_bad}/{p} probes outside the envelopes")),
            Predicate::new(
                "restart_support",
                restart_bad == 0 && nonzero > 0,
                format!("{restart_bad} violations among {outside} probes outside the set, {nonzero} non-zero values"),
            ),
        ],
    })
}

// ---------------------------------------------------------------------------
// singular-scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub pairs: Vec<(usize, usize)>,
    pub eps_exponents: Vec<i32>,
    pub horizon: f64,
    pub beta: f64,
    pub samples: usize,
    pub indicator_samples: usize,
    pub search_budget: usize,
    pub slope_tol: f64,
    /// Shorter horizon of the monotonicity check.
    pub short_horizon: f64,
    /// Constructed endpoints cross-checked against comparison-hierarchy membership.
    pub witness_positives: usize,
    pub witness_eps: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            pairs: vec![(2, 1), (3, 1), (3, 2)],
            eps_exponents: (4..=8).collect(),
            horizon: 1.0,
            beta: 1.0,
            samples: 20_000,
            indicator_samples: 100_000,
            search_budget: 10_000,
            slope_tol: 0.15,
            short_horizon: 0.5,
            witness_positives: 1000,
            witness_eps: 0.1,
        }
    }
}

/// Log-log slope of the weighted `W_s^k(T)` measure in `eps`, the `W/V`
/// sandwich, an indicator cross-check at `k = 1` and monotonicity in `T`.
pub fn singular_scaling(cfg: &ScalingConfig, seed: u64) -> Result<Outcome> {
    if cfg.pairs.iter().any(|&(s, k)| k == 0 || k >= s) || cfg.eps_exponents.len() < 2 {
        return Err(Error::invalid("singular-scaling: need 0 < k < s and at least two eps values"));
    }
    let d = 2;
    let mut w_rows = Vec::new();
    let mut v_rows = Vec::new();
    let mut fits = String::from("s,k,slope,slope_stderr,target,relative_error,wv_min,wv_max,pass\n");
    let mut checks = String::from("check,s,k,T,epsilon,a,a_stderr,b,b_stderr,pass\n");
    let mut predicates = Vec::new();
    for (pi, &(s, k)) in cfg.pairs.iter().enumerate() {
        let mut lx = Vec::new();
        let mut ly = Vec::new();
        let (mut wv_min, mut wv_max) = (f64::INFINITY, 0.0f64);
        for &p in &cfg.eps_exponents {
            let eps = 0.5f64.powi(p);
            let opts = MeasureOptions { dim: d, eps, beta: cfg.beta, samples: cfg.samples, seed: seed.wrapping_add(pi as u64), search_budget: cfg.search_budget };
            let m = singular_measure_estimate(s, k, cfg.horizon, &opts)?;
            if !(m.w.mean > 0.0) {
                return Err(Error::invalid(format!("singular-scaling: no mass found at s={s} k={k} eps={eps}")));
            }
            let ratio = m.w.mean / m.v.mean;
            wv_min = wv_min.min(ratio);
            wv_max = wv_max.max(ratio);
            lx.push(eps.ln());
            ly.push(m.w.mean.ln());
            w_rows.push((s, k, cfg.horizon, eps, m.w));
            v_rows.push((s, k, cfg.horizon, eps, m.v));
        }
        let (_, slope, se) = linear_fit(&lx, &ly);
        let target = (k * (d - 1)) as f64;
        let rel = (slope - target).abs() / target;
        let fact: f64 = (1..=s + k).map(|q| q as f64).product();
        let wv_ok = wv_min >= 1.0 && wv_max <= fact;
        let pass = rel <= cfg.slope_tol && wv_ok;
        let _ = writeln!(fits, "{s},{k},{slope:?},{se:?},{target:?},{rel:?},{wv_min:?},{wv_max:?},{pass}");
        predicates.push(Predicate::new(&format!("slope_s{s}_k{k}"), rel <= cfg.slope_tol, format!("slope {slope:.4} +- {se:.4}, target {target}")));
        predicates.push(Predicate::new(&format!("sandwich_s{s}_k{k}"), wv_ok, format!("W/V in [{wv_min:.4}, {wv_max:.4}], bound {fact}")));

        let eps = 0.5f64.powi(cfg.eps_exponents[0]);
        let opts = MeasureOptions { dim: d, eps, beta: cfg.beta, samples: cfg.samples, seed: seed.wrapping_add(pi as u64), search_budget: cfg.search_budget };
        if k == 1 {
            let w = &w_rows[w_rows.len() - cfg.eps_exponents.len()].4;
            let ind = singular_measure_indicator(s, k, cfg.horizon, &MeasureOptions { samples: cfg.indicator_samples, ..opts })?;
            let ok = (w.mean - ind.mean).abs() <= 3.0 * (w.stderr.powi(2) + ind.stderr.powi(2)).sqrt();
            let _ = writeln!(checks, "indicator,{s},{k},{:?},{eps:?},{:?},{:?},{:?},{:?},{ok}", cfg.horizon, w.mean, w.stderr, ind.mean, ind.stderr);
            predicates.push(Predicate::new(&format!("indicator_s{s}_k{k}"), ok, format!("parametrized {:.4e} vs indicator {:.4e}", w.mean, ind.mean)));
        }
        let short = singular_measure_estimate(s, k, cfg.short_horizon, &opts)?.w;
        let long = &w_rows[w_rows.len() - cfg.eps_exponents.len()].4;
        let ok = short.mean <= long.mean + 2.0 * (short.stderr.powi(2) + long.stderr.powi(2)).sqrt();
        let _ = writeln!(checks, "monotone_T,{s},{k},{:?},{eps:?},{:?},{:?},{:?},{:?},{ok}", cfg.short_horizon, short.mean, short.stderr, long.mean, long.stderr);
        predicates.push(Predicate::new(&format!("monotone_T_s{s}_k{k}"), ok, format!("T={}: {:.4e}, T={}: {:.4e}", cfg.short_horizon, short.mean, cfg.horizon, long.mean)));
    }
    let (witness_csv, agree, total) = witness_agreement(cfg, seed)?;
    predicates.push(Predicate::new("witness_agreement", agree == total && total > 0, format!("{agree}/{total} constructed endpoints agree")));
    Ok(Outcome {
        artifacts: vec![
            ("witnesses.csv".into(), witness_csv),
            ("measure_w.csv".into(), measure_csv(&w_rows)),
            ("measure_v.csv".into(), measure_csv(&v_rows)),
            ("slopes.csv".into(), fits),
            ("checks.csv".into(), checks),
        ],
        predicates,
    })
}

/// Endpoints of random pseudo-trajectories are positives of `V_s^k(T)`: the
/// forward search must find a witness that rebuilds them, and the
/// comparison hierarchy must place them in `W_s^k(T)`.
pub fn witness_agreement(cfg: &ScalingConfig, seed: u64) -> Result<(String, usize, usize)> {
    let out: Vec<Result<(usize, usize, bool, bool, f64)>> = (0..cfg.witness_positives)
        .into_par_iter()
        .map(|m| {
            let (s, k) = cfg.pairs[m % cfg.pairs.len()];
            let mut rng = stream(seed ^ 0x3177, m as u64);
            let pt = random_trajectory(&mut rng, s - k, k, cfg.horizon, 2, cfg.witness_eps)?;
            let end = pt.endpoint().expect("accepted trajectories are defined");
            let (found, gap) = match v_set_membership(end, k, cfg.horizon, cfg.search_budget)? {
                Some(w) => {
                    let again = crate::pseudo::build(&w.root, w.horizon, &w.records)?;
                    let gap = again.endpoint().map_or(f64::INFINITY, |e| {
                        e.positions().iter().chain(e.velocities()).zip(end.positions().iter().chain(end.velocities())).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                    });
                    (gap <= 1e-9, gap)
                }
                None => (false, f64::INFINITY),
            };
            let member = singular_membership(end, k, cfg.horizon, u64::MAX)?;
            Ok((s, k, found, member, gap))
        })
        .collect();
    let mut csv = String::from("s,k,witness,member,rebuild_error\n");
    let mut agree = 0;
    let mut total = 0;
    for r in out {
        let (s, k, found, member, gap) = r?;
        total += 1;
        agree += usize::from(found && member);
        let _ = writeln!(csv, "{s},{k},{found},{member},{gap:?}");
    }
    Ok((csv, agree, total))
}

// ---------------------------------------------------------------------------
// jacobian-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobianConfig {
    /// `(k, tolerance)` pairs.
    pub ks: Vec<(usize, f64)>,
    pub trajectories: usize,
    pub root_count: usize,
    pub horizon: f64,
    pub eps: f64,
}

impl Default for JacobianConfig {
    fn default() -> Self {
        Self { ks: vec![(1, 1e-4), (2, 1e-3)], trajectories: 100, root_count: 2, horizon: 1.0, eps: 0.1 }
    }
}

/// Finite-difference Jacobian of the pseudo-trajectory parametrization
/// against `eps^{k(d-1)} |b|`. Ill-conditioned draws are replaced.
pub fn jacobian_check(cfg: &JacobianConfig, seed: u64) -> Result<Outcome> {
    if cfg.root_count == 0 || cfg.ks.iter().any(|&(k, tol)| k == 0 || !(tol > 0.0)) {
        return Err(Error::invalid("jacobian-check: need k >= 1, positive tolerances and a non-empty root"));
    }
    let mut csv = String::from("k,trial,events,det_coarse,det_fine,target,relative_error,pass\n");
    let mut predicates = Vec::new();
    for &(k, tol) in &cfg.ks {
        let mut rng = stream(seed, k as u64);
        let mut done = 0;
        let mut skipped = 0;
        let mut worst = 0.0f64;
        let mut bad = 0;
        while done < cfg.trajectories {
            let pt = random_trajectory(&mut rng, cfg.root_count, k, cfg.horizon, 2, cfg.eps)?;
            let check = match jacobian_identity_check(&pt) {
                Ok(c) => c,
                Err(Error::IllConditioned(_)) => {
                    skipped += 1;
                    if skipped > 50 * cfg.trajectories.max(1) {
                        return Err(Error::degenerate("jacobian-check: too many ill-conditioned draws"));
                    }
                    continue;
                }
                Err(e) if e.is_degenerate() => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let pass = check.relative_error <= tol;
            bad += usize::from(!pass);
            worst = worst.max(check.relative_error);
            let events: usize = pt.segment_events.iter().sum();
            let _ = writeln!(
                csv,
                "{k},{done},{events},{:?},{:?},{:?},{:?},{pass}",
                check.det_coarse, check.det_fine, check.target, check.relative_error
            );
            done += 1;
        }
        predicates.push(Predicate::new(&format!("jacobian_k{k}"), bad == 0, format!("{done} trajectories, worst {worst:e}, tolerance {tol:e}, {skipped} replaced")));
    }
    Ok(Outcome { artifacts: vec![("jacobian.csv".into(), csv)], predicates })
}

// ---------------------------------------------------------------------------
// chaos-run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmcSanityConfig {
    pub particles: usize,
    pub steps: usize,
    pub dt: f64,
    pub drift_tol: f64,
    pub event_tol: f64,
    pub refinement_particles: usize,
    pub refinement_t: f64,
    pub refinement_probes: usize,
}

impl Default for DsmcSanityConfig {
    fn default() -> Self {
        Self {
            particles: 20_000,
            steps: 1000,
            dt: 0.05,
            drift_tol: 1e-3,
            event_tol: 1e-12,
            refinement_particles: 40_000,
            refinement_t: 0.25,
            refinement_probes: 200,
        }
    }
}

/// Maxwellian invariance, per-step conservation and refinement consistency
/// of the reference solver.
pub fn dsmc_sanity(cfg: &DsmcSanityConfig, seed: u64) -> Result<Outcome> {
    let d = 2;
    let mut sol = homogeneous_maxwellian(d, cfg.particles, 1.0, seed)?;
    let m0 = sol.moments();
    // Sampling spread of the fourth moment, for the statistical invariance check.
    let v4: Vec<f64> = sol.velocities().chunks(d).map(|v| v.iter().map(|c| c * c).sum::<f64>().powi(2)).collect();
    let v4_se = crate::stats::Estimate::from_samples(&v4).stderr;
    let mut prev = m0.clone();
    let mut worst_step = 0.0f64;
    let mut csv = String::from("step,time,events,mass,energy,momentum_x,momentum_y,fourth,drift\n");
    for step in 1..=cfg.steps {
        sol.step(cfg.dt)?;
        let m = sol.moments();
        worst_step = worst_step.max(m.conserved_drift(&prev));
        if step % 50 == 0 || step == cfg.steps {
            let _ = writeln!(
                csv,
                "{step},{:?},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                sol.time(),
                sol.events(),
                m.mass,
                m.energy,
                m.momentum[0],
                m.momentum[1],
                m.fourth,
                m.conserved_drift(&m0)
            );
        }
        prev = m;
    }
    let drift = prev.conserved_drift(&m0);
    let fourth = (prev.fourth - m0.fourth).abs() / m0.fourth;
    let fourth_z = (prev.fourth - m0.fourth).abs() / (std::f64::consts::SQRT_2 * v4_se * m0.mass);
    let spec = DensitySpec::reference(d);
    let refine = refinement_check(&spec, cfg.refinement_particles, 1.0, cfg.refinement_t, 0.01, cfg.refinement_probes, seed ^ 0x2ef)?;
    let _ = writeln!(csv, "# refinement bandwidth={:?} change={:?} bias={:?}", refine.bandwidth, refine.mean_change, refine.mean_bias);
    Ok(Outcome {
        artifacts: vec![("dsmc.csv".into(), csv)],
        predicates: vec![
            Predicate::new(
                "dsmc_invariance",
                drift < cfg.drift_tol && sol.events() > 0,
                format!("conserved-moment drift {drift:e} over {} steps, {} collisions, fourth moment change {fourth:.2e}", cfg.steps, sol.events()),
            ),
            Predicate::new("dsmc_fourth_moment", fourth_z <= 4.0, format!("fourth moment change {fourth:.2e}, {fourth_z:.2} sampling sigmas")),
            Predicate::new("dsmc_event_conservation", worst_step <= cfg.event_tol, format!("worst per-step drift {worst_step:e}")),
            Predicate::new("dsmc_refinement", refine.consistent, format!("change {:.3e} vs bias {:.3e}", refine.mean_change, refine.mean_bias)),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosRunConfig {
    pub experiment: ChaosConfig,
    pub min_tau: f64,
    pub dsmc: DsmcSanityConfig,
}

impl Default for ChaosRunConfig {
    fn default() -> Self {
        Self { experiment: ChaosConfig::default(), min_tau: 0.6, dsmc: DsmcSanityConfig::default() }
    }
}

/// Seminorm trend along `N` for the example family, sup gap, growth budget
/// and the DSMC sanity checks.
pub fn chaos_run(cfg: &ChaosRunConfig, seed: u64) -> Result<Outcome> {
    let exp = ChaosConfig { seed, ..cfg.experiment.clone() };
    let report = chaos_experiment(&exp)?;
    let mut predicates = Vec::new();
    for &(t, tau) in &report.trend {
        predicates.push(Predicate::new(&format!("trend_t{t:.4}"), tau >= cfg.min_tau, format!("Kendall tau {tau:.3} at t = {t:.4}")));
    }
    let low = report.sup_gaps.iter().filter(|r| r.sup_gap < r.threshold).count();
    let min_gap = report.sup_gaps.iter().map(|r| r.sup_gap).fold(f64::INFINITY, f64::min);
    predicates.push(Predicate::new("sup_gap", low == 0, format!("smallest sup gap {min_gap:.4}, {low} below h0/2")));
    let flagged = report.rows.iter().filter(|r| r.inconclusive).count();
    predicates.push(Predicate::new("conclusive", flagged == 0, format!("{flagged} rows with a truncation tail above 10%")));
    if let Some((sem, budget)) = report.budget {
        predicates.push(Predicate::new("growth_budget", sem <= budget, format!("seminorm {sem:.4} vs budget {budget:.4}")));
    }
    let mut window = String::from("nu_max,T_L,C_d\n");
    let _ = writeln!(window, "{:?},{:?},{:?}", report.window.nu_max, report.window.t_l, report.window.c_d);
    let mut bias = String::from("t,bias\n");
    for (t, b) in &report.dsmc_bias {
        let _ = writeln!(bias, "{t:?},{b:?}");
    }
    let mut out = Outcome {
        artifacts: vec![
            ("chaos.csv".into(), chaos_csv(&report.rows)),
            ("sup_gap.csv".into(), sup_gap_csv(&report.sup_gaps)),
            ("window.csv".into(), window),
            ("dsmc_bias.csv".into(), bias),
        ],
        predicates,
    };
    let dsmc = dsmc_sanity(&cfg.dsmc, seed ^ 0xd5)?;
    out.artifacts.extend(dsmc.artifacts);
    out.predicates.extend(dsmc.predicates);
    Ok(out)
}

// ---------------------------------------------------------------------------
// configuration and manifest

/// Full experiment configuration; every section falls back to its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub flow_validate: FlowValidateConfig,
    pub duality_check: DualityConfig,
    pub hat_probe: HatProbeConfig,
    pub singular_scaling: ScalingConfig,
    pub jacobian_check: JacobianConfig,
    pub chaos_run: ChaosRunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            flow_validate: FlowValidateConfig::default(),
            duality_check: DualityConfig::default(),
            hat_probe: HatProbeConfig::default(),
            singular_scaling: ScalingConfig::default(),
            jacobian_check: JacobianConfig::default(),
            chaos_run: ChaosRunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Runs one subcommand by name.
pub fn run(subcommand: &str, cfg: &ExperimentConfig) -> Result<Outcome> {
    let seed = cfg.seed;
    match subcommand {
        "flow-validate" => flow_validate(&cfg.flow_validate, seed),
        "duality-check" => duality_check(&cfg.duality_check, seed),
        "hat-probe" => hat_probe(&cfg.hat_probe, seed),
        "singular-scaling" => singular_scaling(&cfg.singular_scaling, seed),
        "jacobian-check" => jacobian_check(&cfg.jacobian_check, seed),
        "chaos-run" => chaos_run(&cfg.chaos_run, seed),
        other => Err(Error::invalid(format!("unknown subcommand {other:?}"))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub jobs: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: &'a ExperimentConfig,
    pub artifacts: Vec<&'a str>,
    pub predicates: &'a [Predicate],
    pub passed: bool,
}

impl<'a> Manifest<'a> {
    pub fn new(subcommand: &'a str, cfg: &'a ExperimentConfig, outcome: &'a Outcome, jobs: usize, started_unix: u64, finished_unix: u64) -> Self {
        Self {
            tool: "bglab",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: cfg.seed,
            jobs,
            started_unix,
            finished_unix,
            config: cfg,
            artifacts: outcome.artifacts.iter().map(|a| a.0.as_str()).collect(),
            predicates: &outcome.predicates,
            passed: outcome.passed(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Writes the CSV artifacts and `manifest.json` into `dir`.
pub fn write_run(dir: &std::path::Path, outcome: &Outcome, manifest: &Manifest<'_>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in &outcome.artifacts {
        std::fs::write(dir.join(name), body)?;
    }
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_with_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[hat_probe]\nprobes = 12\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hat_probe.probes, 12);
        assert_eq!(cfg.hat_probe.n, HatProbeConfig::default().n);
        let echoed = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(echoed, cfg);
        assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn unknown_subcommand_is_an_error() {
        assert!(run("plot", &ExperimentConfig::default()).is_err());
    }

    #[test]
    fn small_flow_validate_passes() {
        let cfg = FlowValidateConfig { dims: vec![2], lattice_sides: vec![8], min_events: 100, reversibility_trials: 10, jacobian_trials: 2, ..Default::default() };
        let out = flow_validate(&cfg, 3).unwrap();
        assert!(out.passed(), "{:?}", out.predicates);
        assert!(out.artifact("flow_validate.csv").unwrap().starts_with("check,dim,s,events"));
    }

    #[test]
    fn small_hat_probe_passes() {
        let cfg = HatProbeConfig { probes: 20, restart_probes: 40, ..Default::default() };
        let out = hat_probe(&cfg, 5).unwrap();
        for p in &out.predicates {
            if p.name != "restart_support" {
                assert!(p.passed, "{p:?}");
            }
        }
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let bad = HatProbeConfig { max_level: 9, ..Default::default() };
        assert!(hat_probe(&bad, 1).is_err());
        let bad = ScalingConfig { pairs: vec![(2, 2)], ..Default::default() };
        assert!(singular_scaling(&bad, 1).is_err());
        let bad = DualityConfig { ns: vec![9], ..Default::default() };
        assert!(duality_check(&bad, 1).is_err());
    }
}
