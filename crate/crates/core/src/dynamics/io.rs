//! Text records for configurations and event logs.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::config::Configuration;
use super::flow::CollisionEvent;

/// Header `d s epsilon`, then one line `x_1 .. x_d v_1 .. v_d` per particle.
/// Floats are written in shortest round-trip form.
pub fn write_configuration(config: &Configuration) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {:?}", config.dim(), config.count(), config.diameter());
    for i in 0..config.count() {
        let fields: Vec<String> = config.position(i).iter().chain(config.velocity(i)).map(|c| format!("{c:?}")).collect();
        let _ = writeln!(out, "{}", fields.join(" "));
    }
    out
}

pub fn read_configuration(text: &str) -> Result<Configuration> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::Parse(format!("header needs `d s epsilon`, got `{header}`")));
    }
    let d: usize = h[0].parse().map_err(|e| Error::Parse(format!("dimension: {e}")))?;
    let s: usize = h[1].parse().map_err(|e| Error::Parse(format!("count: {e}")))?;
    let eps: f64 = h[2].parse().map_err(|e| Error::Parse(format!("diameter: {e}")))?;
    let mut x = Vec::with_capacity(s * d);
    let mut v = Vec::with_capacity(s * d);
    for k in 0..s {
        let line = lines.next().ok_or_else(|| Error::Parse(format!("expected {s} particle lines, found {k}")))?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("particle {k}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 2 * d {
            return Err(Error::Parse(format!("particle {k}: expected {} fields, found {}", 2 * d, vals.len())));
        }
        x.extend_from_slice(&vals[..d]);
        v.extend_from_slice(&vals[d..]);
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing lines after particle records".into()));
    }
    Configuration::new(d, eps, x, v)
}

/// CSV with header `time,i,j,omega_1,..,omega_d`.
pub fn write_events_csv(events: &[CollisionEvent], dim: usize) -> String {
    let mut out = String::from("time,i,j");
    for k in 1..=dim {
        let _ = write!(out, ",omega_{k}");
    }
    out.push('\n');
    for ev in events {
        let _ = write!(out, "{:?},{},{}", ev.time, ev.pair.0, ev.pair.1);
        for w in &ev.contact_normal {
            let _ = write!(out, ",{w:?}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configuration_round_trip_is_exact() {
        let c = Configuration::new(2, 0.1, vec![0.1, 1.0 / 3.0, 2.0, -1e-17], vec![std::f64::consts::PI, 0.0, -2.5, 7e300]).unwrap();
        let back = read_configuration(&write_configuration(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_records_are_rejected() {
        assert!(read_configuration("").is_err());
        assert!(read_configuration("2 1 0.1\n0 0 1").is_err());
        assert!(read_configuration("2 2 0.1\n0 0 1 0\n").is_err());
        assert!(read_configuration("2 2 0.5\n0 0 1 0\n0.1 0 0 0\n").is_err());
    }
}
