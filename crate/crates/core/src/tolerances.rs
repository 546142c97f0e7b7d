//! Numerical tolerances shared by the dynamics and everything built on it.
//!
//! The dynamics are exact up to roundoff; these constants carve out the
//! null sets (grazing contacts, simultaneous events) explicitly.

/// Allowed overlap, relative to the diameter.
pub const TOL_OVERLAP: f64 = 1e-12;

/// Allowed deviation of a contact normal from unit length.
pub const TOL_UNIT: f64 = 1e-12;

/// Relative discriminant below which a contact is treated as grazing.
pub const TOL_GRAZE: f64 = 1e-12;

/// Events closer than this in time are simultaneous.
pub const TOL_TIE: f64 = 1e-12;

/// Default collision cap for a single flow call.
pub const MAX_EVENTS: usize = 1_000_000;

/// Default level cap for hierarchy evaluations.
pub const LEVEL_CAP: usize = 5;
