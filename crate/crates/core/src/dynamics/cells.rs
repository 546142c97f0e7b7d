//! Cell lists plus an event queue for large systems.
//!
//! Particles carry local clocks and are only advanced when they take part in
//! an event. Stale events are detected through per-particle stamps.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::tolerances::TOL_TIE;
use crate::vecops::norm;

use super::collision::{collide_in_place, impact, Impact};
use super::config::{next_offset, Configuration};
use super::flow::{CollisionEvent, FlowOptions, FlowResult};

type Cell = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Collision,
    Grazing,
    Crossing,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    i: usize,
    j: usize,
    stamp_i: u64,
    stamp_j: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so that BinaryHeap pops the earliest event, lowest pair first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| (other.i, other.j).cmp(&(self.i, self.j)))
            .then_with(|| (other.kind as u8).cmp(&(self.kind as u8)))
    }
}

pub(crate) struct CellEngine<'a> {
    opts: &'a FlowOptions,
    dim: usize,
    eps: f64,
    width: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    clock: Vec<f64>,
    stamp: Vec<u64>,
    cell: Vec<Cell>,
    grid: HashMap<Cell, Vec<usize>>,
    queue: BinaryHeap<Event>,
    horizon: f64,
}

impl<'a> CellEngine<'a> {
    pub(crate) fn new(config: &Configuration, opts: &'a FlowOptions) -> Self {
        let dim = config.dim();
        let s = config.count();
        let eps = config.diameter();
        // Cell width: at least one diameter, roughly one particle per cell.
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for i in 0..s {
            for (k, c) in config.position(i).iter().enumerate() {
                lo[k] = lo[k].min(*c);
                hi[k] = hi[k].max(*c);
            }
        }
        let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(eps)).product();
        let spacing = (vol / s.max(1) as f64).powf(1.0 / dim as f64);
        let width = eps.max(spacing);
        let mut engine = Self {
            opts,
            dim,
            eps,
            width,
            x: config.positions().to_vec(),
            v: config.velocities().to_vec(),
            clock: vec![0.0; s],
            stamp: vec![0; s],
            cell: vec![[0; 3]; s],
            grid: HashMap::new(),
            queue: BinaryHeap::new(),
            horizon: 0.0,
        };
        for i in 0..s {
            let c = engine.cell_of(i);
            engine.cell[i] = c;
            engine.grid.entry(c).or_default().push(i);
        }
        engine
    }

    fn cell_of(&self, i: usize) -> Cell {
        let mut c = [0i64; 3];
        for k in 0..self.dim {
            c[k] = (self.x[i * self.dim + k] / self.width).floor() as i64;
        }
        c
    }

    fn advance_to(&mut self, i: usize, t: f64) {
        let dt = t - self.clock[i];
        let d = self.dim;
        for k in 0..d {
            self.x[i * d + k] += self.v[i * d + k] * dt;
        }
        self.clock[i] = t;
    }

    fn position_at(&self, i: usize, t: f64) -> Vec<f64> {
        let d = self.dim;
        let dt = t - self.clock[i];
        (0..d).map(|k| self.x[i * d + k] + self.v[i * d + k] * dt).collect()
    }

    /// Schedules the next crossing and all collisions of `i`, whose clock is `now`.
    fn predict(&mut self, i: usize, now: f64) {
        let d = self.dim;
        let mut t_cross = f64::INFINITY;
        for k in 0..d {
            let vk = self.v[i * d + k];
            let xk = self.x[i * d + k];
            let c = self.cell[i][k] as f64;
            let t = if vk > 0.0 {
                ((c + 1.0) * self.width - xk) / vk
            } else if vk < 0.0 {
                (c * self.width - xk) / vk
            } else {
                f64::INFINITY
            };
            t_cross = t_cross.min(t.max(0.0));
        }
        if now + t_cross < self.horizon {
            self.queue.push(Event { time: now + t_cross, kind: EventKind::Crossing, i, j: usize::MAX, stamp_i: self.stamp[i], stamp_j: 0 });
        }
        let home = self.cell[i];
        let mut offset = vec![-1i64; d];
        let xi = self.position_at(i, now);
        loop {
            let mut key = home;
            for k in 0..d {
                key[k] += offset[k];
            }
            if let Some(members) = self.grid.get(&key) {
                for &j in members {
                    if j == i {
                        continue;
                    }
                    let xj = self.position_at(j, now);
                    let dx: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| a - b).collect();
                    let dv: Vec<f64> = (0..d).map(|k| self.v[i * d + k] - self.v[j * d + k]).collect();
                    let (kind, t) = match impact(&dx, &dv, self.eps) {
                        Impact::Hit(t) => (EventKind::Collision, t),
                        Impact::Grazing { at } if self.opts.strict_grazing => (EventKind::Grazing, at.max(0.0)),
                        _ => continue,
                    };
                    if now + t < self.horizon {
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        self.queue.push(Event { time: now + t, kind, i: a, j: b, stamp_i: self.stamp[a], stamp_j: self.stamp[b] });
                    }
                }
            }
            if !next_offset(&mut offset) {
                break;
            }
        }
    }

    fn is_live(&self, ev: &Event) -> bool {
        match ev.kind {
            EventKind::Crossing => self.stamp[ev.i] == ev.stamp_i,
            _ => self.stamp[ev.i] == ev.stamp_i && self.stamp[ev.j] == ev.stamp_j,
        }
    }

    fn next_live(&mut self) -> Option<Event> {
        while let Some(ev) = self.queue.peek() {
            if self.is_live(ev) {
                return Some(*ev);
            }
            self.queue.pop();
        }
        None
    }

    pub(crate) fn run(mut self, duration: f64) -> Result<FlowResult> {
        let s = self.clock.len();
        let d = self.dim;
        self.horizon = duration;
        for i in 0..s {
            self.predict(i, 0.0);
        }
        let mut events = Vec::new();
        let mut count = 0usize;
        while let Some(ev) = self.next_live() {
            self.queue.pop();
            match ev.kind {
                EventKind::Grazing => {
                    return Err(Error::degenerate(format!("grazing contact of pair ({}, {}) at t = {}", ev.i, ev.j, ev.time)));
                }
                EventKind::Crossing => {
                    let i = ev.i;
                    self.advance_to(i, ev.time);
                    let old = self.cell[i];
                    let mut new = old;
                    // Move to the neighbouring cell the particle is heading into.
                    for k in 0..d {
                        let vk = self.v[i * d + k];
                        let xk = self.x[i * d + k];
                        if vk > 0.0 && xk >= (old[k] as f64 + 1.0) * self.width - 1e-12 * self.width {
                            new[k] = old[k] + 1;
                        } else if vk < 0.0 && xk <= old[k] as f64 * self.width + 1e-12 * self.width {
                            new[k] = old[k] - 1;
                        }
                    }
                    if new != old {
                        if let Some(m) = self.grid.get_mut(&old) {
                            m.retain(|&p| p != i);
                            if m.is_empty() {
                                self.grid.remove(&old);
                            }
                        }
                        self.grid.entry(new).or_default().push(i);
                        self.cell[i] = new;
                    }
                    self.stamp[i] += 1;
                    self.predict(i, ev.time);
                }
                EventKind::Collision => {
                    if let Some(next) = self.next_live() {
                        if next.kind != EventKind::Crossing
                            && (next.i, next.j) != (ev.i, ev.j)
                            && next.time <= ev.time + TOL_TIE * ev.time.abs().max(1.0)
                            && (next.i == ev.i || next.i == ev.j || next.j == ev.i || next.j == ev.j)
                        {
                            return Err(Error::degenerate(format!(
                                "simultaneous contacts ({},{}) and ({},{}) at t = {}",
                                ev.i, ev.j, next.i, next.j, ev.time
                            )));
                        }
                    }
                    count += 1;
                    if count > self.opts.max_events {
                        return Err(Error::Runaway(self.opts.max_events));
                    }
                    let (i, j) = (ev.i, ev.j);
                    self.advance_to(i, ev.time);
                    self.advance_to(j, ev.time);
                    let mut omega: Vec<f64> = (0..d).map(|k| self.x[j * d + k] - self.x[i * d + k]).collect();
                    let n = norm(&omega);
                    omega.iter_mut().for_each(|c| *c /= n);
                    let mut a = self.v[i * d..(i + 1) * d].to_vec();
                    let mut b = self.v[j * d..(j + 1) * d].to_vec();
                    let pre = (a.clone(), b.clone());
                    collide_in_place(&mut a, &mut b, &omega);
                    self.v[i * d..(i + 1) * d].copy_from_slice(&a);
                    self.v[j * d..(j + 1) * d].copy_from_slice(&b);
                    if self.opts.record_events {
                        events.push(CollisionEvent { time: ev.time, pair: (i, j), contact_normal: omega, pre_velocities: pre, post_velocities: (a, b) });
                    }
                    self.stamp[i] += 1;
                    self.stamp[j] += 1;
                    self.predict(i, ev.time);
                    self.predict(j, ev.time);
                }
            }
        }
        for i in 0..s {
            self.advance_to(i, duration);
        }
        let final_state = Configuration::from_parts_unchecked(d, self.eps, self.x, self.v);
        Ok(FlowResult { final_state, events, elapsed: duration })
    }
}
