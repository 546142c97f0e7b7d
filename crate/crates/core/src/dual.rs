//! Point evaluation of the dual hierarchy, its envelopes and the comparison
//! hierarchy, by characteristics and downward recursion in the level.
//!
//! All four systems share one recursion. A value is carried as a pair
//! `(hi, lo)`; across a collision at level `s` with contact configuration
//! `Y` (pre-collision velocities) and `Y*` (post-collision velocities):
//!
//! ```text
//! hi += (N-s+1) (hi'(Y*^(i)) + hi'(Y*^(j)) - lo'(Y^(i)) - lo'(Y^(j)))
//! lo += (N-s+1) (lo'(Y*^(i)) + lo'(Y*^(j)) - hi'(Y^(i)) - hi'(Y^(j)))
//! ```
//!
//! where primes are level `s-1` evaluated at the remaining time. The dual
//! hierarchy is `hi = lo`, the comparison hierarchy `lo = -hi`, and the
//! envelopes carry their own data on each side.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{flow_forward_visit, Configuration, FlowOptions};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, stream};
use crate::stats::Estimate;
use crate::tolerances::LEVEL_CAP;

pub type SetFn = Arc<dyn Fn(&Configuration) -> bool + Send + Sync>;
pub type ValueFn = Arc<dyn Fn(&Configuration) -> f64 + Send + Sync>;

/// Initial datum at one level.
#[derive(Clone)]
pub enum LevelData {
    /// `c 1_{D_s}`.
    Constant(f64),
    /// `1_A` for a symmetric set `A`.
    Indicator(SetFn),
    /// `N^k 1_A`.
    ScaledIndicator { power: u32, set: SetFn },
    /// Any symmetric bounded function.
    Function(ValueFn),
}

impl std::fmt::Debug for LevelData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LevelData::Constant(c) => write!(f, "Constant({c})"),
            LevelData::Indicator(_) => write!(f, "Indicator(..)"),
            LevelData::ScaledIndicator { power, .. } => write!(f, "ScaledIndicator(N^{power})"),
            LevelData::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl LevelData {
    pub fn eval(&self, n: u64, z: &Configuration) -> f64 {
        match self {
            LevelData::Constant(c) => *c,
            LevelData::Indicator(a) => f64::from(u8::from(a(z))),
            LevelData::ScaledIndicator { power, set } => {
                if set(z) {
                    (n as f64).powi(*power as i32)
                } else {
                    0.0
                }
            }
            LevelData::Function(g) => g(z),
        }
    }

    pub fn indicator(f: impl Fn(&Configuration) -> bool + Send + Sync + 'static) -> Self {
        LevelData::Indicator(Arc::new(f))
    }

    pub fn function(f: impl Fn(&Configuration) -> f64 + Send + Sync + 'static) -> Self {
        LevelData::Function(Arc::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Hierarchy {
    Dual,
    Hat,
    UpperEnvelope,
    LowerEnvelope,
}

impl Hierarchy {
    pub fn name(self) -> &'static str {
        match self {
            Hierarchy::Dual => "dual",
            Hierarchy::Hat => "hat",
            Hierarchy::UpperEnvelope => "upper_envelope",
            Hierarchy::LowerEnvelope => "lower_envelope",
        }
    }
}

/// Initial data `{phi^(s)(0)}` of one hierarchy. Levels missing from the map
/// are identically zero.
#[derive(Debug, Clone)]
pub struct ObservableSpec {
    pub n: u64,
    pub hierarchy: Hierarchy,
    pub levels: BTreeMap<usize, LevelData>,
    /// For the envelopes: the data of the other envelope (lower data when
    /// evaluating the upper envelope and vice versa).
    pub companion: BTreeMap<usize, LevelData>,
    pub cap: usize,
}

impl ObservableSpec {
    pub fn new(n: u64, hierarchy: Hierarchy) -> Self {
        Self { n, hierarchy, levels: BTreeMap::new(), companion: BTreeMap::new(), cap: LEVEL_CAP }
    }

    pub fn with_level(mut self, s: usize, data: LevelData) -> Self {
        self.levels.insert(s, data);
        self
    }

    pub fn with_companion(mut self, s: usize, data: LevelData) -> Self {
        self.companion.insert(s, data);
        self
    }

    /// `1_{D_s}` at every level up to the cap.
    pub fn all_ones(n: u64, hierarchy: Hierarchy) -> Self {
        let mut spec = Self::new(n, hierarchy);
        for s in 1..=spec.cap {
            spec.levels.insert(s, LevelData::Constant(1.0));
        }
        spec
    }

    /// Data of the comparison hierarchy `phi_hat_{N,j}`: `1_{D_j}` at level `j`.
    pub fn hat_data(n: u64, j: usize) -> Self {
        Self::new(n, Hierarchy::Hat).with_level(j, LevelData::Constant(1.0))
    }

    fn lowest_level(&self) -> usize {
        let a = self.levels.keys().next().copied().unwrap_or(usize::MAX);
        let b = self.companion.keys().next().copied().unwrap_or(usize::MAX);
        a.min(b)
    }

    fn data_pair(&self, s: usize, z: &Configuration) -> (f64, f64) {
        let main = self.levels.get(&s).map_or(0.0, |d| d.eval(self.n, z));
        match self.hierarchy {
            Hierarchy::Dual => (main, main),
            Hierarchy::Hat => (main, -main),
            Hierarchy::UpperEnvelope => (main, self.companion.get(&s).map_or(0.0, |d| d.eval(self.n, z))),
            Hierarchy::LowerEnvelope => (self.companion.get(&s).map_or(0.0, |d| d.eval(self.n, z)), main),
        }
    }

    /// Probes every level for symmetry under random permutations; returns the
    /// first offending level.
    pub fn check_symmetry<R: Rng>(&self, rng: &mut R, probes: usize, dim: usize, eps: f64) -> Option<usize> {
        for (&s, data) in self.levels.iter().chain(self.companion.iter()) {
            for _ in 0..probes {
                let z = random_probe(rng, s, dim, eps, 1.5);
                let mut perm: Vec<usize> = (0..s).collect();
                for i in (1..s).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let a = data.eval(self.n, &z);
                let b = data.eval(self.n, &z.permuted(&perm));
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Some(s);
                }
            }
        }
        None
    }
}

/// Random valid configuration with Gaussian positions of width `spread` and
/// standard Gaussian velocities.
pub fn random_probe<R: Rng + ?Sized>(rng: &mut R, s: usize, dim: usize, eps: f64, spread: f64) -> Configuration {
    loop {
        let x = gaussian_vec(rng, s * dim, spread);
        let v = gaussian_vec(rng, s * dim, 1.0);
        if let Ok(c) = Configuration::new(dim, eps, x, v) {
            return c;
        }
    }
}

/// One top-level collision crossed by the characteristic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpRecord {
    pub time: f64,
    pub pair: (usize, usize),
    /// Level `s-1` values `(hi, lo)` at `Y*^(i), Y*^(j), Y^(i), Y^(j)`.
    pub reduced: [(f64, f64); 4],
    pub contribution: f64,
}

/// Exact decomposition of a comparison-hierarchy value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExactHat {
    /// Integer count `M` with `value = M * prod(factors)`.
    pub coefficient: u128,
    /// `(N-j)(N-j-1)..(N-s+1)`.
    pub factors: Vec<u64>,
    pub value: u128,
    /// Per-jump counts at the top level.
    pub per_jump: Vec<u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpLedger {
    /// Transported initial datum.
    pub base: f64,
    pub jumps: Vec<JumpRecord>,
    pub exact: Option<ExactHat>,
}

impl JumpLedger {
    /// Sum of the ledger in the order the jumps were applied.
    pub fn total(&self) -> f64 {
        self.jumps.iter().fold(self.base, |acc, j| acc + j.contribution)
    }
}

struct Evaluator<'a> {
    spec: &'a ObservableSpec,
    opts: FlowOptions,
    lowest: usize,
}

impl Evaluator<'_> {
    fn pair(&self, s: usize, t: f64, z: &Configuration, ledger: Option<&mut Vec<JumpRecord>>) -> Result<(f64, f64)> {
        if s < self.lowest {
            return Ok((0.0, 0.0));
        }
        let n = self.spec.n as f64;
        let weight = n - s as f64 + 1.0;
        let mut hi = 0.0;
        let mut lo = 0.0;
        let mut records = Vec::new();
        let want_records = ledger.is_some();
        let need_jumps = s >= 2 && s - 1 >= self.lowest;
        let end = flow_forward_visit(z, t, &self.opts, |ev, state| {
            if !need_jumps {
                return Ok(ControlFlow::Continue(()));
            }
            let rest = t - ev.time;
            let (i, j) = ev.pair;
            let mut post = state.clone();
            post.velocity_mut(i).copy_from_slice(&ev.post_velocities.0);
            post.velocity_mut(j).copy_from_slice(&ev.post_velocities.1);
            let a = self.pair(s - 1, rest, &post.without(i), None)?;
            let b = self.pair(s - 1, rest, &post.without(j), None)?;
            let c = self.pair(s - 1, rest, &state.without(i), None)?;
            let d = self.pair(s - 1, rest, &state.without(j), None)?;
            let dhi = weight * (a.0 + b.0 - c.1 - d.1);
            let dlo = weight * (a.1 + b.1 - c.0 - d.0);
            hi += dhi;
            lo += dlo;
            if want_records {
                let contribution = if self.spec.hierarchy == Hierarchy::LowerEnvelope { dlo } else { dhi };
                records.push(JumpRecord { time: ev.time, pair: ev.pair, reduced: [a, b, c, d], contribution });
            }
            Ok(ControlFlow::Continue(()))
        })?;
        let (h0, l0) = self.spec.data_pair(s, &end);
        if let Some(l) = ledger {
            *l = records;
        }
        Ok((h0 + hi, l0 + lo))
    }
}

fn check_level(s: usize, cap: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::invalid("empty configuration"));
    }
    if s > cap {
        return Err(Error::LevelCap { level: s, cap });
    }
    Ok(())
}

/// `phi^(s)(t, Z)` of the hierarchy named in `spec`, with its top-level jumps.
///
/// Grazing contacts along any characteristic are reported as degenerate.
pub fn evaluate(spec: &ObservableSpec, t: f64, z: &Configuration) -> Result<(f64, JumpLedger)> {
    check_level(z.count(), spec.cap)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid("evaluation time must be finite and non-negative"));
    }
    let ev = Evaluator { spec, opts: FlowOptions { record_events: false, ..FlowOptions::strict() }, lowest: spec.lowest_level() };
    let mut jumps = Vec::new();
    let (hi, lo) = ev.pair(z.count(), t, z, Some(&mut jumps))?;
    let value = if spec.hierarchy == Hierarchy::LowerEnvelope { lo } else { hi };
    let jump_sum: f64 = jumps.iter().map(|j| j.contribution).sum();
    let ledger = JumpLedger { base: value - jump_sum, jumps, exact: None };
    Ok((value, ledger))
}

fn hat_factors(n: u64, j: usize, s: usize) -> Result<Vec<u64>> {
    (j + 1..=s)
        .map(|k| n.checked_sub(k as u64 - 1).filter(|&f| f > 0).ok_or_else(|| Error::invalid(format!("N = {n} too small for level {s}"))))
        .collect()
}

/// Exact recursion for `phi_hat_{N,j}^(s)`: returns `(value, M)` with
/// `value = M (N-j)..(N-s+1)`, the two carried independently.
fn hat_exact_rec(j: usize, s: usize, n: u64, t: f64, z: &Configuration, opts: &FlowOptions, top: Option<&mut Vec<u128>>) -> Result<(u128, u128)> {
    if s < j {
        return Ok((0, 0));
    }
    if s == j {
        return Ok((1, 1));
    }
    let weight = (n - s as u64 + 1) as u128;
    let mut value: u128 = 0;
    let mut count: u128 = 0;
    let mut per_jump = Vec::new();
    flow_forward_visit(z, t, opts, |ev, state| {
        let rest = t - ev.time;
        let (i, jj) = ev.pair;
        let mut post = state.clone();
        post.velocity_mut(i).copy_from_slice(&ev.post_velocities.0);
        post.velocity_mut(jj).copy_from_slice(&ev.post_velocities.1);
        let mut v = 0u128;
        let mut m = 0u128;
        for y in [post.without(i), post.without(jj), state.without(i), state.without(jj)] {
            let (a, b) = hat_exact_rec(j, s - 1, n, rest, &y, opts, None)?;
            v = v.checked_add(a).ok_or(Error::Overflow)?;
            m = m.checked_add(b).ok_or(Error::Overflow)?;
        }
        value = value.checked_add(v.checked_mul(weight).ok_or(Error::Overflow)?).ok_or(Error::Overflow)?;
        count = count.checked_add(m).ok_or(Error::Overflow)?;
        per_jump.push(m);
        Ok(ControlFlow::Continue(()))
    })?;
    if let Some(p) = top {
        *p = per_jump;
    }
    Ok((value, count))
}

/// `phi_hat_{N,j}^(s)(t, Z)` in exact integers.
pub fn evaluate_hat(j: usize, n: u64, t: f64, z: &Configuration) -> Result<ExactHat> {
    evaluate_hat_capped(j, n, t, z, LEVEL_CAP)
}

pub fn evaluate_hat_capped(j: usize, n: u64, t: f64, z: &Configuration, cap: usize) -> Result<ExactHat> {
    let s = z.count();
    check_level(s, cap)?;
    if j == 0 {
        return Err(Error::invalid("hat level j must be at least 1"));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid("evaluation time must be finite and non-negative"));
    }
    let factors = if s > j { hat_factors(n, j, s)? } else { Vec::new() };
    let opts = FlowOptions { record_events: false, ..FlowOptions::strict() };
    let mut per_jump = Vec::new();
    let (value, coefficient) = hat_exact_rec(j, s, n, t, z, &opts, Some(&mut per_jump))?;
    Ok(ExactHat { coefficient, factors, value, per_jump })
}

impl ExactHat {
    /// `(N-j)..(N-s+1)` as an exact integer.
    pub fn factor_product(&self) -> Result<u128> {
        self.factors.iter().try_fold(1u128, |acc, &f| acc.checked_mul(f as u128).ok_or(Error::Overflow))
    }

    /// Value divisible by the factor product and equal to `M` times it.
    pub fn is_consistent(&self) -> bool {
        match self.factor_product() {
            Ok(p) if self.value == 0 => self.coefficient == 0 || p == 0,
            Ok(p) => self.value % p == 0 && self.value / p == self.coefficient,
            Err(_) => false,
        }
    }
}

/// Natural log of `prod_{j<k<=s} 4 (N-k+1) (32 k^{3/2})^{k^2}`.
pub fn ln_hat_upper_bound(j: usize, s: usize, n: u64) -> f64 {
    (j + 1..=s)
        .map(|k| {
            let kf = k as f64;
            4f64.ln() + ((n - k as u64 + 1) as f64).ln() + kf * kf * (32.0 * kf.powf(1.5)).ln()
        })
        .sum()
}

/// Natural log of `prod_{j<k<=s} 4 (32 k^{3/2})^{k^2}`.
pub fn ln_comparability_bound(j: usize, s: usize) -> f64 {
    (j + 1..=s).map(|k| 4f64.ln() + (k * k) as f64 * (32.0 * (k as f64).powf(1.5)).ln()).sum()
}

/// Membership in `W_s^k(T)`: `phi_hat_{N,s-k}^(s)(T, Z) != 0`.
///
/// The value is a sum of non-negative counts, so the search stops at the
/// first contributing jump.
pub fn singular_membership(z: &Configuration, k: usize, t: f64, n: u64) -> Result<bool> {
    let s = z.count();
    if k >= s {
        return Err(Error::invalid("need 0 <= k < s"));
    }
    if n < s as u64 {
        return Err(Error::invalid("need N >= s"));
    }
    let opts = FlowOptions { record_events: false, ..FlowOptions::strict() };
    hat_support(s - k, s, t, z, &opts)
}

fn hat_support(j: usize, s: usize, t: f64, z: &Configuration, opts: &FlowOptions) -> Result<bool> {
    if s < j {
        return Ok(false);
    }
    if s == j {
        return Ok(true);
    }
    let mut found = false;
    flow_forward_visit(z, t, opts, |ev, state| {
        let rest = t - ev.time;
        let (i, jj) = ev.pair;
        if s - 1 == j {
            found = true;
            return Ok(ControlFlow::Break(()));
        }
        let mut post = state.clone();
        post.velocity_mut(i).copy_from_slice(&ev.post_velocities.0);
        post.velocity_mut(jj).copy_from_slice(&ev.post_velocities.1);
        for y in [post.without(i), post.without(jj), state.without(i), state.without(jj)] {
            if hat_support(j, s - 1, rest, &y, opts)? {
                found = true;
                return Ok(ControlFlow::Break(()));
            }
        }
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(found)
}

/// Which exponential weight the norm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NormWeight {
    /// `exp(-beta E_s - mu s)`.
    Energy,
    /// `exp(-beta (E_s + I_s) - mu s)`.
    EnergyInertia,
}

/// Options for [`weighted_l1_norm`].
#[derive(Debug, Clone, Copy)]
pub struct NormOptions {
    pub weight: NormWeight,
    pub samples_per_level: usize,
    pub seed: u64,
    pub dim: usize,
    pub eps: f64,
    /// Position proposal width for the energy-only weight; the data must be
    /// negligible outside a few widths.
    pub position_spread: f64,
}

/// `sum_s 1/s! int |phi^(s)(t)| w_s` by importance sampling, levels up to the
/// cap. Velocities are drawn from the Gaussian weight itself; positions from
/// it as well for the (E+I) weight, else from a broad Gaussian.
pub fn weighted_l1_norm(spec: &ObservableSpec, beta: f64, mu: f64, t: f64, opts: &NormOptions) -> Result<(Estimate, usize)> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    let d = opts.dim;
    let top = spec.cap.min(spec.n as usize);
    let lowest = spec.lowest_level();
    let mut mean = 0.0;
    let mut var = 0.0;
    let mut resamples = 0usize;
    for s in lowest.max(1)..=top {
        let sv = 1.0 / beta.sqrt();
        let sx = match opts.weight {
            NormWeight::Energy => opts.position_spread,
            NormWeight::EnergyInertia => sv,
        };
        let gauss_norm = (2.0 * std::f64::consts::PI).powf((d * s) as f64 / 2.0);
        // int exp(-beta |V|^2/2) dV and the position proposal normaliser.
        let v_mass = gauss_norm * sv.powi((d * s) as i32);
        let fact: f64 = (1..=s).map(|k| k as f64).product();
        let mut rng = stream(opts.seed, s as u64);
        let mut vals = Vec::with_capacity(opts.samples_per_level);
        while vals.len() < opts.samples_per_level {
            let x = gaussian_vec(&mut rng, s * d, sx);
            let v = gaussian_vec(&mut rng, s * d, sv);
            let Ok(z) = Configuration::new(d, opts.eps, x.clone(), v) else {
                vals.push(0.0);
                continue;
            };
            let phi = match evaluate(spec, t, &z) {
                Ok((p, _)) => p,
                Err(e) if e.is_degenerate() => {
                    resamples += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let x2: f64 = x.iter().map(|c| c * c).sum();
            let w = match opts.weight {
                // Position proposal density is exp(-|X|^2 / 2 sx^2) / (2 pi sx^2)^{ds/2}.
                NormWeight::Energy => gauss_norm * sx.powi((d * s) as i32) * (x2 / (2.0 * sx * sx)).exp(),
                // exp(-beta I_s) equals the proposal shape exactly.
                NormWeight::EnergyInertia => gauss_norm * sx.powi((d * s) as i32),
            };
            vals.push(phi.abs() * w * v_mass * (-mu * s as f64).exp() / fact);
        }
        let e = Estimate::from_samples(&vals);
        mean += e.mean;
        var += e.stderr * e.stderr;
    }
    Ok((Estimate { mean, stderr: var.sqrt(), samples: opts.samples_per_level }, resamples))
}

/// Probe-report rows `hierarchy,j,s,N,t,value_integer_part,value,jumps,resamples`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub hierarchy: String,
    pub j: usize,
    pub s: usize,
    pub n: u64,
    pub t: f64,
    pub value_integer_part: u128,
    pub value: f64,
    pub jumps: usize,
    pub resamples: usize,
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("hierarchy,j,s,N,t,value_integer_part,value,jumps,resamples\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:?},{},{:?},{},{}\n",
            r.hierarchy, r.j, r.s, r.n, r.t, r.value_integer_part, r.value, r.jumps, r.resamples
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow;

    /// Two spheres that collide once head-on at t = 2 eps.
    fn head_on(eps: f64) -> Configuration {
        Configuration::new(2, eps, vec![0.0, 0.0, 3.0 * eps, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    fn probe(seed: u64, s: usize) -> Configuration {
        let mut rng = stream(seed, s as u64);
        random_probe(&mut rng, s, 2, 0.4, 0.7)
    }

    #[test]
    fn all_ones_is_stationary() {
        let spec = ObservableSpec::all_ones(7, Hierarchy::Dual);
        for seed in 0..20 {
            for s in 1..=4 {
                let z = probe(seed, s);
                let (v, _) = match evaluate(&spec, 2.0, &z) {
                    Ok(r) => r,
                    Err(e) if e.is_degenerate() => continue,
                    Err(e) => panic!("{e}"),
                };
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn single_level_transports_freely() {
        let spec = ObservableSpec::new(5, Hierarchy::Dual).with_level(1, LevelData::function(|z| z.position(0)[0] + 2.0 * z.velocity(0)[1]));
        let z = Configuration::new(2, 0.1, vec![0.5, 0.0], vec![1.0, -1.0]).unwrap();
        let (v, ledger) = evaluate(&spec, 3.0, &z).unwrap();
        // Free transport: x -> x + v t = 3.5.
        assert_eq!(v, 3.5 - 2.0);
        assert!(ledger.jumps.is_empty());
    }

    #[test]
    fn single_jump_hand_computation() {
        // phi_hat_{N,1}, s = 2, one collision: the four reduced one-particle
        // values are 1, the jump is (N-1)(1+1+1+1) = 4(N-1).
        let n = 10;
        let spec = ObservableSpec::hat_data(n, 1);
        let eps = 0.1;
        let z = head_on(eps);
        assert_eq!(flow(&z, 1.0).unwrap().events.len(), 1);
        let (v, ledger) = evaluate(&spec, 1.0, &z).unwrap();
        assert_eq!(v, 4.0 * (n as f64 - 1.0));
        assert_eq!(ledger.jumps.len(), 1);
        assert!(ledger.jumps[0].reduced.iter().all(|&(hi, lo)| hi == 1.0 && lo == -1.0));
        assert_eq!(ledger.total(), v);
        // Before the collision the value is still 0.
        assert_eq!(evaluate(&spec, 0.15, &z).unwrap().0, 0.0);
        let exact = evaluate_hat(1, n, 1.0, &z).unwrap();
        assert_eq!(exact.value, 4 * (n as u128 - 1));
        assert_eq!(exact.coefficient, 4);
        assert!(exact.is_consistent());
    }

    #[test]
    fn hat_levels_below_and_at_j() {
        let z = probe(3, 2);
        assert_eq!(evaluate_hat(3, 10, 1.0, &z).unwrap().value, 0);
        assert_eq!(evaluate_hat(2, 10, 5.0, &z).unwrap().value, 1);
    }

    #[test]
    fn dual_two_body_hand_computation() {
        // Level-1 datum g(z) = x_1 (first coordinate). One head-on collision at
        // tau = 2 eps exchanges velocities. With t = 1, N = 2:
        // phi^(2)(t, Z) = 0 + (x'_0 + x'_1)_post - (x_0 + x_1)_free, where the
        // post terms are the actual positions at t and the pre terms the free
        // ones; both sums equal 3 eps + t so the jump vanishes.
        let eps = 0.1;
        let g = LevelData::function(|z| z.position(0)[0]);
        let spec = ObservableSpec::new(2, Hierarchy::Dual).with_level(1, g.clone());
        let (v, ledger) = evaluate(&spec, 1.0, &head_on(eps)).unwrap();
        assert_eq!(ledger.jumps.len(), 1);
        assert!(v.abs() < 1e-15);
        // A non-linear datum: g = x_1^2. Actual positions at t: 0.2 and 1.1;
        // free ones: 1.0 and 0.3.
        let g2 = LevelData::function(|z| z.position(0)[0].powi(2));
        let spec = ObservableSpec::new(2, Hierarchy::Dual).with_level(1, g2);
        let (v, _) = evaluate(&spec, 1.0, &head_on(eps)).unwrap();
        let expect = (0.2f64.powi(2) + 1.1f64.powi(2)) - (1.0f64.powi(2) + 0.3f64.powi(2));
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn level_cap_and_bad_inputs() {
        let z = probe(1, 6);
        let spec = ObservableSpec::all_ones(10, Hierarchy::Dual);
        assert!(matches!(evaluate(&spec, 1.0, &z), Err(Error::LevelCap { level: 6, cap: 5 })));
        assert!(evaluate(&spec, -1.0, &probe(1, 2)).is_err());
        assert!(singular_membership(&probe(1, 2), 2, 1.0, 10).is_err());
    }

    #[test]
    fn singular_membership_examples() {
        let z = probe(2, 3);
        assert!(singular_membership(&z, 0, 1.0, 10).unwrap());
        // Receding pair never collides.
        let far = Configuration::new(2, 0.1, vec![0.0, 0.0, 1.0, 0.0], vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(!singular_membership(&far, 1, 10.0, 10).unwrap());
        let hit = head_on(0.1);
        assert!(!singular_membership(&hit, 1, 0.15, 10).unwrap());
        assert!(singular_membership(&hit, 1, 0.25, 10).unwrap());
    }

    #[test]
    fn hat_matches_float_evaluation() {
        for seed in 0..30 {
            let z = probe(seed, 3);
            for j in 1..=2 {
                let spec = ObservableSpec::hat_data(9, j);
                let (Ok(exact), Ok((v, _))) = (evaluate_hat(j, 9, 3.0, &z), evaluate(&spec, 3.0, &z)) else { continue };
                assert_eq!(exact.value as f64, v);
                assert!(exact.is_consistent());
                let member = singular_membership(&z, 3 - j, 3.0, 9).unwrap();
                assert_eq!(member, exact.value != 0);
            }
        }
    }

    #[test]
    fn symmetry_probe_detects_asymmetric_data() {
        let mut rng = stream(0, 0);
        let sym = ObservableSpec::new(5, Hierarchy::Dual).with_level(2, LevelData::function(|z| z.energy()));
        assert_eq!(sym.check_symmetry(&mut rng, 20, 2, 0.1), None);
        let asym = ObservableSpec::new(5, Hierarchy::Dual).with_level(2, LevelData::function(|z| z.position(0)[0]));
        assert_eq!(asym.check_symmetry(&mut rng, 20, 2, 0.1), Some(2));
    }

    #[test]
    fn norm_of_zero_and_closed_form() {
        let opts = NormOptions { weight: NormWeight::EnergyInertia, samples_per_level: 2000, seed: 1, dim: 2, eps: 0.01, position_spread: 3.0 };
        let zero = ObservableSpec::new(3, Hierarchy::Dual);
        assert_eq!(weighted_l1_norm(&zero, 1.0, 0.0, 1.0, &opts).unwrap().0.mean, 0.0);
        // Level 1 only, phi = 1: (2 pi / beta)^d e^{-mu}.
        let one = ObservableSpec::new(3, Hierarchy::Dual).with_level(1, LevelData::Constant(1.0));
        let one = ObservableSpec { cap: 1, ..one };
        let (beta, mu) = (1.5, 0.3);
        let (e, _) = weighted_l1_norm(&one, beta, mu, 0.7, &opts).unwrap();
        let exact = (2.0 * std::f64::consts::PI / beta).powi(2) * (-mu as f64).exp();
        assert!((e.mean - exact).abs() <= 3.0 * e.stderr + 1e-12 * exact);
    }
}
