//! Pseudo-trajectories: backward flows with particle creations, their
//! collision kernels, the Duhamel series built on them, and the singular sets
//! they sweep out.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{flow_forward_visit, flow_with, io::write_configuration, Configuration, FlowOptions};
use crate::ensembles::DensitySpec;
use crate::error::{Error, Result};
use crate::linalg::{det, fd_jacobian};
use crate::rng::{gaussian_vec, ordered_times, stream, unit_sphere, SimRng};
use crate::stats::Estimate;
use crate::tolerances::TOL_UNIT;
use crate::vecops::{norm, norm2, sphere_area, tangent_basis};

/// Creation of particle `s + j` next to particle `parent` at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CreationRecord {
    pub time: f64,
    pub velocity: Vec<f64>,
    pub omega: Vec<f64>,
    pub parent: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    /// Post-collisional creation: the velocities were scattered.
    Plus,
    /// Pre-collisional creation: velocities kept.
    Minus,
}

/// One factor of `b_{s,s+k}`: `+[g]_+` or `-[g]_-` with
/// `g = omega . (v_new - v_parent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelFactor {
    pub branch: Branch,
    /// `[g]_+` or `[g]_-`, non-negative.
    pub magnitude: f64,
}

impl KernelFactor {
    pub fn signed(&self) -> f64 {
        match self.branch {
            Branch::Plus => self.magnitude,
            Branch::Minus => -self.magnitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrajectoryStatus {
    Ok,
    /// Creation `index` would overlap an existing sphere.
    OverlapRejected { index: usize },
}

#[derive(Debug, Clone)]
pub struct PseudoTrajectory {
    pub root: Configuration,
    pub horizon: f64,
    pub records: Vec<CreationRecord>,
    /// State right after each creation, then the state at time 0.
    pub segments: Vec<Configuration>,
    /// Recollisions in each backward segment; entry 0 is `[t_1, t]`.
    pub segment_events: Vec<usize>,
    pub kernel: Vec<KernelFactor>,
    pub status: TrajectoryStatus,
}

impl PseudoTrajectory {
    /// `b_{s,s+k}`.
    pub fn kernel_product(&self) -> f64 {
        self.kernel.iter().map(KernelFactor::signed).product()
    }

    /// `Z_{s,s+k}[..]` at time 0, if the trajectory is defined.
    pub fn endpoint(&self) -> Option<&Configuration> {
        match self.status {
            TrajectoryStatus::Ok => self.segments.last(),
            TrajectoryStatus::OverlapRejected { .. } => None,
        }
    }

    pub fn recollision_free(&self) -> bool {
        self.segment_events.iter().all(|&n| n == 0)
    }

    /// Structured text dump: root, creation records, segments.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "horizon {:?}", self.horizon);
        out.push_str("root\n");
        out.push_str(&write_configuration(&self.root));
        let _ = writeln!(out, "records {}", self.records.len());
        for (r, k) in self.records.iter().zip(self.kernel.iter().map(Some).chain(std::iter::repeat(None))) {
            let v: Vec<String> = r.velocity.iter().map(|c| format!("{c:?}")).collect();
            let w: Vec<String> = r.omega.iter().map(|c| format!("{c:?}")).collect();
            let branch = k.map_or("-".to_string(), |k| format!("{:?}", k.branch));
            let _ = writeln!(out, "{:?} {} {} {} {}", r.time, r.parent, v.join(" "), w.join(" "), branch);
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let _ = writeln!(out, "segment {i} recollisions {}", self.segment_events[i]);
            out.push_str(&write_configuration(seg));
        }
        let _ = writeln!(out, "status {:?}", self.status);
        out
    }
}

fn validate(root: &Configuration, t: f64, records: &[CreationRecord]) -> Result<()> {
    let d = root.dim();
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid("pseudo-trajectory horizon must be positive"));
    }
    let mut prev = t;
    for (j, r) in records.iter().enumerate() {
        if !(r.time > 0.0 && r.time <= prev) {
            return Err(Error::invalid(format!("creation {j}: times must satisfy 0 < t_k <= .. <= t_1 <= t")));
        }
        prev = r.time;
        if r.velocity.len() != d || r.omega.len() != d || r.velocity.iter().chain(&r.omega).any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("creation {j}: malformed vectors")));
        }
        if (norm2(&r.omega) - 1.0).abs() > TOL_UNIT * 10.0 {
            return Err(Error::invalid(format!("creation {j}: impact parameter is not unit")));
        }
        if r.parent >= root.count() + j {
            return Err(Error::invalid(format!("creation {j}: parent {} out of range", r.parent)));
        }
    }
    Ok(())
}

/// Builds `Z_{s,s+k}[root, t; records]` with the default flow options.
pub fn build(root: &Configuration, t: f64, records: &[CreationRecord]) -> Result<PseudoTrajectory> {
    build_with(root, t, records, &FlowOptions { record_events: false, ..FlowOptions::default() })
}

pub fn build_with(root: &Configuration, t: f64, records: &[CreationRecord], opts: &FlowOptions) -> Result<PseudoTrajectory> {
    validate(root, t, records)?;
    let eps = root.diameter();
    let count_opts = FlowOptions { record_events: true, ..*opts };
    let mut state = root.clone();
    let mut now = t;
    let mut segments = Vec::with_capacity(records.len() + 1);
    let mut segment_events = Vec::with_capacity(records.len() + 1);
    let mut kernel = Vec::with_capacity(records.len());
    let mut status = TrajectoryStatus::Ok;
    for (idx, r) in records.iter().enumerate() {
        let back = flow_with(&state, -(now - r.time), &count_opts)?;
        segment_events.push(back.events.len());
        state = back.final_state;
        now = r.time;
        let p = r.parent;
        let xp = state.position(p).to_vec();
        let vp = state.velocity(p).to_vec();
        let x_new: Vec<f64> = xp.iter().zip(&r.omega).map(|(a, w)| a + eps * w).collect();
        let g: f64 = r.omega.iter().zip(r.velocity.iter().zip(&vp)).map(|(w, (a, b))| w * (a - b)).sum();
        state.push(&x_new, &r.velocity);
        let new = state.count() - 1;
        if (0..new).any(|q| q != p && state.pair_overlaps(q, new)) {
            status = TrajectoryStatus::OverlapRejected { index: idx };
            segments.push(state.clone());
            break;
        }
        if g > 0.0 {
            let (a, b) = crate::dynamics::collide(&vp, &r.velocity, &r.omega)?;
            state.velocity_mut(p).copy_from_slice(&a);
            state.velocity_mut(new).copy_from_slice(&b);
            kernel.push(KernelFactor { branch: Branch::Plus, magnitude: g });
        } else {
            kernel.push(KernelFactor { branch: Branch::Minus, magnitude: -g });
        }
        segments.push(state.clone());
    }
    if status == TrajectoryStatus::Ok {
        let back = flow_with(&state, -now, &count_opts)?;
        segment_events.push(back.events.len());
        segments.push(back.final_state);
    }
    Ok(PseudoTrajectory { root: root.clone(), horizon: t, records: records.to_vec(), segments, segment_events, kernel, status })
}

/// `a_{N,k,s} = (N-s)!/(N-s-k)! eps^{k(d-1)}`.
pub fn a_coefficient(n: u64, k: usize, s: usize, eps: f64, dim: usize) -> f64 {
    if (n as usize) < s + k {
        return 0.0;
    }
    let falling: f64 = (0..k).map(|q| (n as usize - s - q) as f64).product();
    falling * eps.powi((k * (dim - 1)) as i32)
}

/// Result of the finite-difference check of `|det| = eps^{k(d-1)} |b|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianCheck {
    pub det_coarse: f64,
    pub det_fine: f64,
    pub target: f64,
    pub relative_error: f64,
}

pub const JACOBIAN_STEPS: (f64, f64) = (1e-4, 1e-5);

/// Parameters `(Z_s, t_1..t_k, v's, omega tangent coordinates)` as a flat
/// vector, and the inverse map back to a trajectory.
struct Parametrization<'a> {
    pt: &'a PseudoTrajectory,
    bases: Vec<Vec<Vec<f64>>>,
}

impl Parametrization<'_> {
    fn point(&self) -> Vec<f64> {
        let pt = self.pt;
        let d = pt.root.dim();
        let mut p: Vec<f64> = pt.root.positions().to_vec();
        p.extend_from_slice(pt.root.velocities());
        p.extend(pt.records.iter().map(|r| r.time));
        for r in &pt.records {
            p.extend_from_slice(&r.velocity);
        }
        p.extend(std::iter::repeat_n(0.0, pt.records.len() * (d - 1)));
        p
    }

    fn rebuild(&self, p: &[f64], opts: &FlowOptions) -> Result<PseudoTrajectory> {
        let pt = self.pt;
        let d = pt.root.dim();
        let s = pt.root.count();
        let k = pt.records.len();
        let root = Configuration::from_parts(d, pt.root.diameter(), p[..s * d].to_vec(), p[s * d..2 * s * d].to_vec())?;
        let mut off = 2 * s * d;
        let times = &p[off..off + k];
        off += k;
        let mut records = Vec::with_capacity(k);
        for (j, r) in pt.records.iter().enumerate() {
            let v = p[off + j * d..off + (j + 1) * d].to_vec();
            let th = &p[off + k * d + j * (d - 1)..off + k * d + (j + 1) * (d - 1)];
            let mut w = r.omega.clone();
            for (a, e) in th.iter().zip(&self.bases[j]) {
                for (wi, ei) in w.iter_mut().zip(e) {
                    *wi += a * ei;
                }
            }
            let n = norm(&w);
            w.iter_mut().for_each(|c| *c /= n);
            records.push(CreationRecord { time: times[j], velocity: v, omega: w, parent: r.parent });
        }
        build_with(&root, pt.horizon, &records, opts)
    }
}

/// Central finite-difference Jacobian of the parametrization at two step
/// sizes, compared with `eps^{k(d-1)} |b|`.
///
/// Perturbations that change the branch pattern or the recollision count
/// mean the trajectory is too close to a singular configuration; that is
/// reported as ill-conditioned.
pub fn jacobian_identity_check(pt: &PseudoTrajectory) -> Result<JacobianCheck> {
    let Some(end) = pt.endpoint() else {
        return Err(Error::invalid("jacobian check needs a defined trajectory"));
    };
    let d = pt.root.dim();
    let k = pt.records.len();
    let eps = pt.root.diameter();
    let opts = FlowOptions { record_events: false, ..FlowOptions::strict() };
    let bases: Vec<Vec<Vec<f64>>> = pt.records.iter().map(|r| tangent_basis(&r.omega)).collect();
    let param = Parametrization { pt, bases };
    let x0 = param.point();
    let n = x0.len();
    if n != 2 * d * end.count() {
        return Err(Error::invalid("parametrization is not square"));
    }
    let branches: Vec<Branch> = pt.kernel.iter().map(|f| f.branch).collect();
    let map = |p: &[f64]| -> Result<Vec<f64>> {
        // Perturbed times can cross; that is a near-singular draw, not bad input.
        let q = param.rebuild(p, &opts).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::IllConditioned(m),
            e => e,
        })?;
        let same = q.status == TrajectoryStatus::Ok
            && q.segment_events == pt.segment_events
            && q.kernel.iter().map(|f| f.branch).eq(branches.iter().copied());
        if !same {
            return Err(Error::IllConditioned("perturbation changes the trajectory structure".into()));
        }
        let e = q.endpoint().expect("status checked");
        let mut out = e.positions().to_vec();
        out.extend_from_slice(e.velocities());
        Ok(out)
    };
    let wrap = |e: Error| if e.is_degenerate() { Error::IllConditioned(e.to_string()) } else { e };
    let j1 = fd_jacobian(&x0, JACOBIAN_STEPS.0, map).map_err(wrap)?;
    let j2 = fd_jacobian(&x0, JACOBIAN_STEPS.1, map).map_err(wrap)?;
    let d1 = det(j1, n).abs();
    let d2 = det(j2, n).abs();
    let target = eps.powi((k * (d - 1)) as i32) * pt.kernel_product().abs();
    if !(target > 0.0) && k > 0 {
        return Err(Error::IllConditioned("vanishing collision kernel".into()));
    }
    let target = if k == 0 { 1.0 } else { target };
    // Central differences have O(h^2) truncation error: the two steps must
    // agree far better than the tolerance being tested.
    if (d1 - d2).abs() > 1e-3 * target {
        return Err(Error::IllConditioned(format!("finite differences disagree: {d1:e} vs {d2:e}")));
    }
    // Richardson extrapolation of the two steps (ratio 10).
    let r = (JACOBIAN_STEPS.0 / JACOBIAN_STEPS.1).powi(2);
    let extrapolated = (r * d2 - d1) / (r - 1.0);
    Ok(JacobianCheck { det_coarse: d1, det_fine: d2, target, relative_error: (extrapolated - target).abs() / target })
}

/// Data at time 0 for the Duhamel series.
#[derive(Clone)]
pub enum DataSource {
    /// `f^{otimes (s+k)} 1_{D_{s+k}}`.
    Tensorized(DensitySpec),
    /// Any function of the full configuration.
    Closure(Arc<dyn Fn(&Configuration) -> f64 + Send + Sync>),
}

impl DataSource {
    pub fn eval(&self, z: &Configuration) -> f64 {
        match self {
            DataSource::Tensorized(spec) => {
                if z.is_valid() {
                    spec.tensor_density(z)
                } else {
                    0.0
                }
            }
            DataSource::Closure(f) => f(z),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DuhamelOptions {
    pub n: u64,
    pub depth: usize,
    /// Samples per term `k >= 1`.
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian velocity proposal.
    pub proposal_sigma: f64,
    /// Created velocities beyond this norm are dropped (`|v| <= 2R`).
    pub vmax: Option<f64>,
    /// Drop trajectories with recollisions.
    pub exclude_recollisions: bool,
}

impl DuhamelOptions {
    pub fn new(n: u64, depth: usize, samples: usize, seed: u64) -> Self {
        Self { n, depth, samples, seed, proposal_sigma: 1.25, vmax: None, exclude_recollisions: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuhamelEstimate {
    pub value: f64,
    pub stderr: f64,
    /// One estimate per term `k = 0..=depth`.
    pub terms: Vec<Estimate>,
    pub overlap_rejected: usize,
    pub recollision_excluded: usize,
    pub degenerate: usize,
}

/// Monte Carlo for the truncated series `sum_{k<=n} a_{N,k,s} int b f(0, Z_{s,s+k})`.
///
/// Sample `m` of term `k` uses stream `(seed, k * 2^32 + m)`, so estimates
/// at different `N` share their random numbers.
pub fn duhamel_point_value(z: &Configuration, t: f64, data: &DataSource, opts: &DuhamelOptions) -> Result<DuhamelEstimate> {
    let s = z.count();
    let d = z.dim();
    let eps = z.diameter();
    if t < 0.0 || !t.is_finite() {
        return Err(Error::invalid("time must be finite and non-negative"));
    }
    let free_opts = FlowOptions { record_events: false, ..FlowOptions::default() };
    let f0 = if t == 0.0 { data.eval(z) } else { data.eval(&flow_with(z, -t, &free_opts)?.final_state) };
    let mut terms = vec![Estimate::exact(f0)];
    let mut overlap_rejected = 0;
    let mut recollision_excluded = 0;
    let mut degenerate = 0;
    let area = sphere_area(d);
    for k in 1..=opts.depth {
        let a = a_coefficient(opts.n, k, s, eps, d);
        if a == 0.0 || t == 0.0 {
            terms.push(Estimate::exact(0.0));
            continue;
        }
        let kfact: f64 = (1..=k).map(|q| q as f64).product();
        let simplex = t.powi(k as i32) / kfact;
        let samples: Vec<(f64, u8)> = (0..opts.samples)
            .into_par_iter()
            .map(|m| {
                let mut rng = stream(opts.seed, ((k as u64) << 32) + m as u64);
                duhamel_sample(z, t, k, data, opts, &mut rng, area)
            })
            .collect();
        let mut vals = Vec::with_capacity(samples.len());
        for (v, tag) in samples {
            match tag {
                1 => overlap_rejected += 1,
                2 => recollision_excluded += 1,
                3 => degenerate += 1,
                _ => {}
            }
            vals.push(v);
        }
        terms.push(Estimate::from_samples(&vals).scaled(a * simplex));
    }
    let value = terms.iter().map(|e| e.mean).sum();
    let stderr = terms.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt();
    Ok(DuhamelEstimate { value, stderr, terms, overlap_rejected, recollision_excluded, degenerate })
}

/// One weighted draw of term `k` (without `a_{N,k,s} t^k / k!`), tagged
/// 0 = used, 1 = overlap, 2 = recollision excluded, 3 = degenerate.
fn duhamel_sample(z: &Configuration, t: f64, k: usize, data: &DataSource, opts: &DuhamelOptions, rng: &mut SimRng, area: f64) -> (f64, u8) {
    let s = z.count();
    let d = z.dim();
    let sig = opts.proposal_sigma;
    let times = ordered_times(rng, k, t);
    let mut records = Vec::with_capacity(k);
    let mut inv_q = 1.0;
    let mut inside = true;
    for (j, &tj) in times.iter().enumerate() {
        let v = gaussian_vec(rng, d, sig);
        let omega = unit_sphere(rng, d);
        let parent = rng.random_range(0..s + j);
        let v2 = norm2(&v);
        if opts.vmax.is_some_and(|m| v2 > m * m) {
            inside = false;
        }
        let q = (-v2 / (2.0 * sig * sig)).exp() / (2.0 * std::f64::consts::PI * sig * sig).powf(d as f64 / 2.0);
        inv_q *= area * (s + j) as f64 / q;
        records.push(CreationRecord { time: tj, velocity: v, omega, parent });
    }
    if !inside {
        return (0.0, 0);
    }
    let pt = match build(z, t, &records) {
        Ok(pt) => pt,
        Err(_) => return (0.0, 3),
    };
    let Some(end) = pt.endpoint() else { return (0.0, 1) };
    if opts.exclude_recollisions && !pt.recollision_free() {
        return (0.0, 2);
    }
    (pt.kernel_product() * data.eval(end) * inv_q, 0)
}

/// A pseudo-trajectory realising a configuration as its endpoint.
#[derive(Debug, Clone)]
pub struct Witness {
    pub root: Configuration,
    pub horizon: f64,
    pub records: Vec<CreationRecord>,
}

/// Outcome of the forward search for creation chains ending at `Z_s`.
#[derive(Debug, Clone)]
pub struct ChainSearch {
    /// Number of chains found (the multiplicity of `Z_s` under the
    /// parametrization with horizon `T`).
    pub count: usize,
    pub witness: Option<Witness>,
    /// False if the node budget ran out.
    pub complete: bool,
}

struct ChainSearcher {
    horizon: f64,
    budget: usize,
    nodes: usize,
    stop_at_first: bool,
    opts: FlowOptions,
}

impl ChainSearcher {
    /// Chains removing the top `k` particles of `y`, observed at absolute
    /// time `now`. `trail` holds the records found so far, latest creation
    /// (smallest time) first.
    fn search(&mut self, y: &Configuration, k: usize, now: f64, trail: &mut Vec<CreationRecord>, found: &mut Option<Witness>) -> Result<usize> {
        self.nodes += 1;
        if k == 0 {
            if found.is_none() {
                let t_root = (now + self.horizon) / 2.0;
                let root = crate::dynamics::flow_with(y, t_root - now, &self.opts)?.final_state;
                let records: Vec<CreationRecord> = trail.iter().rev().cloned().collect();
                *found = Some(Witness { root, horizon: t_root, records });
            }
            return Ok(1);
        }
        if self.nodes > self.budget {
            return Ok(0);
        }
        let top = y.count() - 1;
        let mut total = 0usize;
        let mut err = None;
        let opts = self.opts;
        flow_forward_visit(y, self.horizon - now, &opts, |ev, state| {
            if ev.pair.1 != top {
                return Ok(ControlFlow::Continue(()));
            }
            let p = ev.pair.0;
            let tau = now + ev.time;
            if tau <= 0.0 {
                return Ok(ControlFlow::Continue(()));
            }
            // Post branch: the parent leaves with its post-collision velocity
            // and the creation was post-collisional.
            let mut post = state.clone();
            post.velocity_mut(p).copy_from_slice(&ev.post_velocities.0);
            let branches = [(post.without(top), ev.post_velocities.1.clone()), (state.without(top), ev.pre_velocities.1.clone())];
            for (reduced, v_new) in branches {
                trail.push(CreationRecord { time: tau, velocity: v_new, omega: ev.contact_normal.clone(), parent: p });
                match self.search(&reduced, k - 1, tau, trail, found) {
                    Ok(c) => total += c,
                    Err(e) => {
                        err = Some(e);
                        trail.pop();
                        return Ok(ControlFlow::Break(()));
                    }
                }
                trail.pop();
                if self.stop_at_first && total > 0 {
                    return Ok(ControlFlow::Break(()));
                }
            }
            Ok(ControlFlow::Continue(()))
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(total)
    }
}

fn chain_search(z: &Configuration, k: usize, horizon: f64, budget: usize, stop_at_first: bool) -> Result<ChainSearch> {
    if k >= z.count() {
        return Err(Error::invalid("need 0 <= k < s"));
    }
    let mut searcher = ChainSearcher { horizon, budget, nodes: 0, stop_at_first, opts: FlowOptions { record_events: false, ..FlowOptions::strict() } };
    let mut found = None;
    let count = searcher.search(z, k, 0.0, &mut Vec::new(), &mut found)?;
    Ok(ChainSearch { count, witness: found, complete: searcher.nodes <= budget })
}

/// Semi-decision for `Z_s in V_s^k(T)`: searches for a witness among the
/// forward contacts of the created particles. `None` means "not found".
pub fn v_set_membership(z: &Configuration, k: usize, horizon: f64, search_budget: usize) -> Result<Option<Witness>> {
    if k == 0 {
        return Ok(Some(Witness { root: z.clone(), horizon, records: Vec::new() }));
    }
    Ok(chain_search(z, k, horizon, search_budget, true)?.witness)
}

/// Number of creation chains ending at `Z_s` within horizon `T`.
pub fn v_chain_count(z: &Configuration, k: usize, horizon: f64, search_budget: usize) -> Result<ChainSearch> {
    chain_search(z, k, horizon, search_budget, false)
}

/// All permutations of `0..s` in lexicographic order.
pub fn permutations(s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..s).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (0..s.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else { break };
        let j = (i + 1..s).rev().find(|&j| p[j] > p[i]).expect("successor exists");
        p.swap(i, j);
        p[i + 1..].reverse();
    }
    out
}

/// Options for the singular-set measure estimators.
#[derive(Debug, Clone, Copy)]
pub struct MeasureOptions {
    pub dim: usize,
    pub eps: f64,
    pub beta: f64,
    pub samples: usize,
    pub seed: u64,
    pub search_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureEstimate {
    /// `int 1_V exp(-beta (E + I))`.
    pub v: Estimate,
    /// `int 1_W exp(-beta (E + I))`.
    pub w: Estimate,
    pub rejected: usize,
    pub degenerate: usize,
}

/// One draw of the parametrization with horizon `T` and its proposal
/// density. Root positions are drawn as `y + v T` so that endpoints land
/// near the Gaussian weight.
pub(crate) fn sample_parametrization(rng: &mut SimRng, s: usize, k: usize, horizon: f64, dim: usize, eps: f64, beta: f64) -> (Option<Configuration>, Vec<CreationRecord>, f64) {
    let r = s - k;
    let sig = 1.0 / beta.sqrt();
    let gauss = |x2: f64, n: usize| (-x2 / (2.0 * sig * sig)).exp() / (2.0 * std::f64::consts::PI * sig * sig).powf(n as f64 / 2.0);
    let y = gaussian_vec(rng, r * dim, sig);
    let v = gaussian_vec(rng, r * dim, sig);
    let mut q = gauss(norm2(&y), r * dim) * gauss(norm2(&v), r * dim);
    let x: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + b * horizon).collect();
    let root = Configuration::new(dim, eps, x, v).ok();
    let times = ordered_times(rng, k, horizon);
    let kfact: f64 = (1..=k).map(|q| q as f64).product();
    q *= kfact / horizon.powi(k as i32);
    let area = sphere_area(dim);
    let mut records = Vec::with_capacity(k);
    for (j, &tj) in times.iter().enumerate() {
        let vn = gaussian_vec(rng, dim, sig);
        q *= gauss(norm2(&vn), dim);
        let omega = unit_sphere(rng, dim);
        q /= area;
        let parent = rng.random_range(0..r + j);
        q /= (r + j) as f64;
        records.push(CreationRecord { time: tj, velocity: vn, omega, parent });
    }
    (root, records, q)
}

/// Gaussian weight `exp(-beta (E_s + I_s))`.
pub fn energy_inertia_weight(z: &Configuration, beta: f64) -> f64 {
    (-beta * (z.energy() + z.inertia())).exp()
}

/// Weighted measures of `V_s^k(T)` and `W_s^k(T)` through the
/// parametrization: `|det| = eps^{k(d-1)} |b|` turns the pushforward of the
/// proposal into the volume element, and dividing by the chain count (and
/// for `W` by the number of labelings in `V`) removes multiplicity.
pub fn singular_measure_estimate(s: usize, k: usize, horizon: f64, opts: &MeasureOptions) -> Result<MeasureEstimate> {
    if k == 0 || k >= s {
        return Err(Error::invalid("need 0 < k < s"));
    }
    let d = opts.dim;
    let pref = opts.eps.powi((k * (d - 1)) as i32);
    let perms = permutations(s);
    let sfact = perms.len() as f64;
    let draws: Vec<(f64, f64, u8)> = (0..opts.samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(opts.seed, m as u64);
            let (root, records, q) = sample_parametrization(&mut rng, s, k, horizon, d, opts.eps, opts.beta);
            let Some(root) = root else { return (0.0, 0.0, 1) };
            let pt = match build_with(&root, horizon, &records, &FlowOptions { record_events: false, ..FlowOptions::strict() }) {
                Ok(pt) => pt,
                Err(_) => return (0.0, 0.0, 2),
            };
            let Some(end) = pt.endpoint() else { return (0.0, 0.0, 1) };
            let Ok(chains) = v_chain_count(end, k, horizon, opts.search_budget) else { return (0.0, 0.0, 2) };
            if chains.count == 0 {
                return (0.0, 0.0, 2);
            }
            let mut labelings = 0usize;
            for p in &perms {
                match v_set_membership(&end.permuted(p), k, horizon, opts.search_budget) {
                    Ok(Some(_)) => labelings += 1,
                    Ok(None) => {}
                    Err(_) => return (0.0, 0.0, 2),
                }
            }
            let base = pref * pt.kernel_product().abs() * energy_inertia_weight(end, opts.beta) / (q * chains.count as f64);
            (base, sfact * base / labelings.max(1) as f64, 0)
        })
        .collect();
    let v: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let w: Vec<f64> = draws.iter().map(|d| d.1).collect();
    Ok(MeasureEstimate {
        v: Estimate::from_samples(&v),
        w: Estimate::from_samples(&w),
        rejected: draws.iter().filter(|d| d.2 == 1).count(),
        degenerate: draws.iter().filter(|d| d.2 == 2).count(),
    })
}

/// Direct indicator sampling of `int 1_W exp(-beta (E + I))`: draws from the
/// normalised weight and tests membership through the comparison hierarchy.
pub fn singular_measure_indicator(s: usize, k: usize, horizon: f64, opts: &MeasureOptions) -> Result<Estimate> {
    let d = opts.dim;
    let sig = 1.0 / opts.beta.sqrt();
    let mass = (2.0 * std::f64::consts::PI * sig * sig).powf((2 * d * s) as f64 / 2.0);
    let hits: Vec<f64> = (0..opts.samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(opts.seed ^ 0x5eed, m as u64);
            let x = gaussian_vec(&mut rng, s * d, sig);
            let v = gaussian_vec(&mut rng, s * d, sig);
            let Ok(z) = Configuration::new(d, opts.eps, x, v) else { return 0.0 };
            match crate::dual::singular_membership(&z, k, horizon, u64::MAX) {
                Ok(true) => 1.0,
                _ => 0.0,
            }
        })
        .collect();
    Ok(Estimate::from_samples(&hits).scaled(mass))
}

/// Rows `s,k,T,epsilon,estimate,stderr`.
pub fn measure_csv(rows: &[(usize, usize, f64, f64, Estimate)]) -> String {
    let mut out = String::from("s,k,T,epsilon,estimate,stderr\n");
    for (s, k, t, eps, e) in rows {
        out.push_str(&format!("{s},{k},{t:?},{eps:?},{:?},{:?}\n", e.mean, e.stderr));
    }
    out
}

/// Random pseudo-trajectory with all creations defined, for probes.
pub fn random_trajectory(rng: &mut SimRng, s: usize, k: usize, t: f64, dim: usize, eps: f64) -> Result<PseudoTrajectory> {
    loop {
        let root = crate::dual::random_probe(rng, s, dim, eps, 1.0);
        let times = ordered_times(rng, k, t);
        let records: Vec<CreationRecord> = times
            .iter()
            .enumerate()
            .map(|(j, &tj)| CreationRecord { time: tj, velocity: gaussian_vec(rng, dim, 1.0), omega: unit_sphere(rng, dim), parent: rng.random_range(0..s + j) })
            .collect();
        match build(&root, t, &records) {
            Ok(pt) if pt.status == TrajectoryStatus::Ok => return Ok(pt),
            Ok(_) => continue,
            Err(e) if e.is_degenerate() => continue,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{evaluate, singular_membership, Hierarchy, LevelData, ObservableSpec};

    fn root2() -> Configuration {
        Configuration::new(2, 0.1, vec![0.0, 0.0, 1.0, 0.5], vec![1.0, 0.0, -0.5, 0.2]).unwrap()
    }

    #[test]
    fn empty_records_are_a_backward_flow() {
        let pt = build(&root2(), 1.5, &[]).unwrap();
        let back = crate::dynamics::flow(&root2(), -1.5).unwrap().final_state;
        assert_eq!(pt.endpoint().unwrap(), &back);
        assert_eq!(pt.kernel_product(), 1.0);
        assert_eq!(pt.segments.len(), 1);
    }

    #[test]
    fn minus_branch_keeps_velocities() {
        let root = Configuration::new(2, 0.1, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        // omega = e_1, v_new = (0, 1): g = omega.(v_new - v_1) = -1 < 0.
        let rec = CreationRecord { time: 0.5, velocity: vec![0.0, 1.0], omega: vec![1.0, 0.0], parent: 0 };
        let pt = build(&root, 1.0, &[rec]).unwrap();
        assert_eq!(pt.kernel.len(), 1);
        assert_eq!(pt.kernel[0].branch, Branch::Minus);
        // [g]_- = 1 and the signed factor of C^- is -[g]_- = g.
        assert_eq!(pt.kernel[0].magnitude, 1.0);
        assert_eq!(pt.kernel_product(), -1.0);
        let created = &pt.segments[0];
        assert_eq!(created.velocity(0), &[1.0, 0.0]);
        assert_eq!(created.velocity(1), &[0.0, 1.0]);
        // Root at time 1 sits at x = 0; at t_1 = 0.5 it is at -0.5.
        assert!((created.position(0)[0] + 0.5).abs() < 1e-15);
        assert!((created.position(1)[0] + 0.4).abs() < 1e-15);
        assert_eq!(pt.endpoint().unwrap().count(), 2);
    }

    #[test]
    fn plus_branch_scatters() {
        let root = Configuration::new(2, 0.1, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        // omega = -e_1, v_new = (0,0): g = -(0 - 1) = 1 > 0.
        let rec = CreationRecord { time: 0.5, velocity: vec![0.0, 0.0], omega: vec![-1.0, 0.0], parent: 0 };
        let pt = build(&root, 1.0, &[rec]).unwrap();
        assert_eq!(pt.kernel[0].branch, Branch::Plus);
        assert_eq!(pt.kernel_product(), 1.0);
        let created = &pt.segments[0];
        assert_eq!(created.velocity(0), &[0.0, 0.0]);
        assert_eq!(created.velocity(1), &[1.0, 0.0]);
        assert!(pt.recollision_free());
    }

    #[test]
    fn overlapping_creation_is_rejected() {
        let root = Configuration::new(2, 0.1, vec![0.0, 0.0, 0.15, 0.0], vec![0.0; 4]).unwrap();
        let rec = CreationRecord { time: 0.5, velocity: vec![0.0, 0.0], omega: vec![1.0, 0.0], parent: 0 };
        let pt = build(&root, 1.0, &[rec]).unwrap();
        assert_eq!(pt.status, TrajectoryStatus::OverlapRejected { index: 0 });
        assert!(pt.endpoint().is_none());
    }

    #[test]
    fn malformed_records_are_errors() {
        let root = root2();
        let bad_time = CreationRecord { time: 2.0, velocity: vec![0.0, 0.0], omega: vec![1.0, 0.0], parent: 0 };
        assert!(build(&root, 1.0, &[bad_time]).is_err());
        let bad_parent = CreationRecord { time: 0.5, velocity: vec![0.0, 0.0], omega: vec![1.0, 0.0], parent: 2 };
        assert!(build(&root, 1.0, &[bad_parent]).is_err());
        let bad_omega = CreationRecord { time: 0.5, velocity: vec![0.0, 0.0], omega: vec![1.0, 1.0], parent: 0 };
        assert!(build(&root, 1.0, &[bad_omega]).is_err());
    }

    #[test]
    fn a_coefficients() {
        for n in [3u64, 10, 100] {
            for s in 1..3 {
                assert_eq!(a_coefficient(n, 0, s, 0.01, 2), 1.0);
            }
        }
        assert!((a_coefficient(10, 2, 1, 0.1, 2) - 9.0 * 8.0 * 0.01).abs() < 1e-15);
        assert_eq!(a_coefficient(3, 3, 1, 0.1, 2), 0.0);
    }

    #[test]
    fn jacobian_k0_is_measure_preserving() {
        let mut rng = stream(3, 0);
        let pt = random_trajectory(&mut rng, 3, 0, 2.0, 2, 0.3).unwrap();
        let c = jacobian_identity_check(&pt).unwrap();
        assert!(c.relative_error < 1e-4, "{c:?}");
    }

    #[test]
    fn jacobian_single_creation_by_hand() {
        // s = 1, k = 1, d = 2 at a generic point.
        let root = Configuration::new(2, 0.05, vec![0.3, -0.2], vec![0.7, 0.4]).unwrap();
        let th: f64 = 2.0;
        let rec = CreationRecord { time: 0.6, velocity: vec![-0.3, 0.9], omega: vec![th.cos(), th.sin()], parent: 0 };
        let pt = build(&root, 1.0, &[rec]).unwrap();
        let c = jacobian_identity_check(&pt).unwrap();
        assert!(c.relative_error < 1e-4, "{c:?}");
    }

    #[test]
    fn witnesses_rebuild_endpoints() {
        let mut rng = stream(5, 0);
        let mut checked = 0;
        while checked < 20 {
            let pt = random_trajectory(&mut rng, 1, 2, 1.0, 2, 0.1).unwrap();
            let end = pt.endpoint().unwrap().clone();
            let Some(w) = v_set_membership(&end, 2, 1.0, 10_000).unwrap() else {
                panic!("constructed endpoint not found");
            };
            let again = build(&w.root, w.horizon, &w.records).unwrap();
            let e2 = again.endpoint().unwrap();
            for (a, b) in e2.positions().iter().chain(e2.velocities()).zip(end.positions().iter().chain(end.velocities())) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(singular_membership(&end, 2, 1.0, 10).unwrap());
            checked += 1;
        }
    }

    #[test]
    fn chain_count_matches_hat_for_pairs() {
        // For s = 2, k = 1 each collision in [0, T) gives two chains per
        // labeling, while the hat count gives four per collision.
        let mut rng = stream(6, 0);
        for _ in 0..50 {
            let z = crate::dual::random_probe(&mut rng, 2, 2, 0.3, 0.6);
            let a = v_chain_count(&z, 1, 2.0, 1000).unwrap().count;
            let b = v_chain_count(&z.permuted(&[1, 0]), 1, 2.0, 1000).unwrap().count;
            let hat = crate::dual::evaluate_hat(1, 10, 2.0, &z).unwrap();
            assert_eq!((a + b) as u128, hat.coefficient);
        }
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn duhamel_zero_depth_is_free_term() {
        let spec = DensitySpec::reference(2);
        let z = root2();
        let est = duhamel_point_value(&z, 0.8, &DataSource::Tensorized(spec.clone()), &DuhamelOptions::new(100, 0, 10, 1)).unwrap();
        let back = crate::dynamics::flow(&z, -0.8).unwrap().final_state;
        assert_eq!(est.value, spec.tensor_density(&back));
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn recollision_free_endpoints_carry_integer_multiples() {
        // Dual data 1_E at level s = 1 with E a half-plane; the level-2 value
        // at a one-creation endpoint is an integer multiple of N - 1.
        let n = 7u64;
        let e = LevelData::indicator(|z: &Configuration| z.position(0)[0] > 0.0);
        let spec = ObservableSpec::new(n, Hierarchy::Dual).with_level(1, e);
        let mut rng = stream(8, 0);
        let mut nonzero = 0;
        for _ in 0..200 {
            let pt = random_trajectory(&mut rng, 1, 1, 1.0, 2, 0.2).unwrap();
            if !pt.recollision_free() {
                continue;
            }
            let end = pt.endpoint().unwrap();
            let Ok((v, _)) = evaluate(&spec, 1.0, end) else { continue };
            let m = v / (n - 1) as f64;
            assert!((m - m.round()).abs() < 1e-9, "{v}");
            if v != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 0);
    }
}
