use std::ops::ControlFlow;

use crate::error::{Error, Result};
use crate::tolerances::{MAX_EVENTS, TOL_TIE};
use crate::vecops::{norm, sub};

use super::cells::CellEngine;
use super::collision::{collide_in_place, impact, Impact};
use super::config::Configuration;

/// One binary collision: `x_j = x_i + eps * contact_normal` at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionEvent {
    /// Signed time offset from the start of the flow call.
    pub time: f64,
    pub pair: (usize, usize),
    pub contact_normal: Vec<f64>,
    pub pre_velocities: (Vec<f64>, Vec<f64>),
    pub post_velocities: (Vec<f64>, Vec<f64>),
}

/// `psi_s^t Z` together with its collision history.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub final_state: Configuration,
    /// Ordered in the direction of the flow.
    pub events: Vec<CollisionEvent>,
    pub elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowStrategy {
    /// All-pairs event table for small systems, cell lists otherwise.
    #[default]
    Auto,
    AllPairs,
    CellList,
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub max_events: usize,
    pub strategy: FlowStrategy,
    /// Report grazing contacts inside the horizon as degenerate instead of
    /// treating them as misses.
    pub strict_grazing: bool,
    pub record_events: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { max_events: MAX_EVENTS, strategy: FlowStrategy::Auto, strict_grazing: false, record_events: true }
    }
}

impl FlowOptions {
    pub fn strict() -> Self {
        Self { strict_grazing: true, ..Self::default() }
    }
}

/// Systems up to this size use the all-pairs table under [`FlowStrategy::Auto`].
pub const ALL_PAIRS_LIMIT: usize = 8;

/// Event-driven hard-sphere flow for a signed duration.
pub fn flow(config: &Configuration, duration: f64) -> Result<FlowResult> {
    flow_with(config, duration, &FlowOptions::default())
}

pub fn flow_with(config: &Configuration, duration: f64, opts: &FlowOptions) -> Result<FlowResult> {
    if !duration.is_finite() {
        return Err(Error::invalid("flow duration must be finite"));
    }
    if duration < 0.0 {
        let mut res = flow_forward(&config.flip_velocities(), -duration, opts)?;
        res.final_state = res.final_state.flip_velocities();
        for ev in &mut res.events {
            ev.time = -ev.time;
            for v in [&mut ev.pre_velocities.0, &mut ev.pre_velocities.1, &mut ev.post_velocities.0, &mut ev.post_velocities.1] {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        res.elapsed = duration;
        return Ok(res);
    }
    flow_forward(config, duration, opts)
}

fn flow_forward(config: &Configuration, duration: f64, opts: &FlowOptions) -> Result<FlowResult> {
    let use_cells = match opts.strategy {
        FlowStrategy::AllPairs => false,
        FlowStrategy::CellList => true,
        FlowStrategy::Auto => config.count() > ALL_PAIRS_LIMIT,
    };
    if use_cells {
        return CellEngine::new(config, opts).run(duration);
    }
    let mut events = Vec::new();
    let final_state = flow_forward_visit(config, duration, opts, |ev, _| {
        if opts.record_events {
            events.push(ev.clone());
        }
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(FlowResult { final_state, events, elapsed: duration })
}

/// Forward flow with a callback at every collision.
///
/// The callback receives the event and the state at the collision time with
/// the pre-collision velocities still in place. Returning
/// `ControlFlow::Break` stops the flow; the state at that collision is then
/// returned instead of the final one.
pub fn flow_forward_visit<F>(config: &Configuration, duration: f64, opts: &FlowOptions, mut visit: F) -> Result<Configuration>
where
    F: FnMut(&CollisionEvent, &Configuration) -> Result<ControlFlow<()>>,
{
    if duration < 0.0 {
        return Err(Error::invalid("flow_forward_visit needs a non-negative duration"));
    }
    let s = config.count();
    let mut state = config.clone();
    if duration == 0.0 || s < 2 {
        state.advance(duration);
        return Ok(state);
    }
    let mut table = PairTable::new(s);
    for i in 0..s {
        for j in i + 1..s {
            table.set(i, j, pair_impact(&state, i, j, 0.0));
        }
    }
    let mut now = 0.0;
    let mut count = 0usize;
    loop {
        let next = table.earliest(opts.strict_grazing);
        let Some((t_ev, i, j, kind)) = next else { break };
        if t_ev >= duration {
            break;
        }
        if kind == Kind::Grazing {
            return Err(Error::degenerate(format!("grazing contact of pair ({i}, {j}) at t = {t_ev}")));
        }
        // Simultaneous events sharing a particle are triple contacts.
        let ties = table.within(t_ev, TOL_TIE * t_ev.abs().max(1.0), opts.strict_grazing);
        if ties.len() > 1 {
            for (a, &(p, q)) in ties.iter().enumerate() {
                for &(r, u) in &ties[a + 1..] {
                    if p == r || p == u || q == r || q == u {
                        return Err(Error::degenerate(format!("simultaneous contacts ({p},{q}) and ({r},{u}) at t = {t_ev}")));
                    }
                }
            }
        }
        let (i, j) = ties.first().copied().unwrap_or((i, j));
        state.advance(t_ev - now);
        now = t_ev;
        count += 1;
        if count > opts.max_events {
            return Err(Error::Runaway(opts.max_events));
        }
        let mut omega = sub(state.position(j), state.position(i));
        let n = norm(&omega);
        omega.iter_mut().for_each(|c| *c /= n);
        let pre = (state.velocity(i).to_vec(), state.velocity(j).to_vec());
        let (mut a, mut b) = pre.clone();
        collide_in_place(&mut a, &mut b, &omega);
        let ev = CollisionEvent { time: now, pair: (i, j), contact_normal: omega, pre_velocities: pre, post_velocities: (a.clone(), b.clone()) };
        if visit(&ev, &state)?.is_break() {
            return Ok(state);
        }
        state.velocity_mut(i).copy_from_slice(&a);
        state.velocity_mut(j).copy_from_slice(&b);
        for k in 0..s {
            if k != i {
                let (p, q) = if k < i { (k, i) } else { (i, k) };
                table.set(p, q, pair_impact(&state, p, q, now));
            }
            if k != j && k != i {
                let (p, q) = if k < j { (k, j) } else { (j, k) };
                table.set(p, q, pair_impact(&state, p, q, now));
            }
        }
    }
    state.advance(duration - now);
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Hit,
    Grazing,
}

/// Absolute event time for pair (i, j) given the state at time `now`.
fn pair_impact(state: &Configuration, i: usize, j: usize, now: f64) -> Option<(f64, Kind)> {
    let dx = sub(state.position(i), state.position(j));
    let dv = sub(state.velocity(i), state.velocity(j));
    match impact(&dx, &dv, state.diameter()) {
        Impact::Hit(t) => Some((now + t, Kind::Hit)),
        Impact::Grazing { at } => Some((now + at.max(0.0), Kind::Grazing)),
        Impact::Miss => None,
    }
}

struct PairTable {
    s: usize,
    times: Vec<Option<(f64, Kind)>>,
}

impl PairTable {
    fn new(s: usize) -> Self {
        Self { s, times: vec![None; s * s] }
    }

    fn set(&mut self, i: usize, j: usize, v: Option<(f64, Kind)>) {
        self.times[i * self.s + j] = v;
    }

    fn iter(&self, strict: bool) -> impl Iterator<Item = (f64, usize, usize, Kind)> + '_ {
        (0..self.s).flat_map(move |i| {
            (i + 1..self.s).filter_map(move |j| match self.times[i * self.s + j] {
                Some((t, Kind::Grazing)) if strict => Some((t, i, j, Kind::Grazing)),
                Some((t, Kind::Hit)) => Some((t, i, j, Kind::Hit)),
                _ => None,
            })
        })
    }

    fn earliest(&self, strict: bool) -> Option<(f64, usize, usize, Kind)> {
        self.iter(strict).min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Hit pairs within `tol` of `t`, in index order.
    fn within(&self, t: f64, tol: f64, strict: bool) -> Vec<(usize, usize)> {
        self.iter(strict).filter(|e| e.0 <= t + tol && e.3 == Kind::Hit).map(|e| (e.1, e.2)).collect()
    }
}

/// Membership in `K_s`: the backward flow is free for all positive times.
///
/// Decided pairwise in closed form from `min_{tau > 0} |r - u tau|`.
pub fn backward_free_noncolliding(config: &Configuration) -> bool {
    let s = config.count();
    let eps2 = config.diameter() * config.diameter();
    for i in 0..s {
        for j in i + 1..s {
            let r = sub(config.position(i), config.position(j));
            let u = sub(config.velocity(i), config.velocity(j));
            let ru: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
            let rr: f64 = r.iter().map(|a| a * a).sum();
            let uu: f64 = u.iter().map(|a| a * a).sum();
            let min2 = if ru <= 0.0 || uu == 0.0 { rr } else { rr - ru * ru / uu };
            if min2 <= eps2 {
                return false;
            }
        }
    }
    true
}
