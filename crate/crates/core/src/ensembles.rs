//! Initial N-particle measures, conditioned sampling and tuple statistics.

use num_rational::Ratio;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::dynamics::{flow, Configuration};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, stream, SimRng};
use crate::stats::Estimate;
use crate::vecops::{ball_volume, norm, norm2};

/// One isotropic Gaussian bump in `(x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub center_x: Vec<f64>,
    pub center_v: Vec<f64>,
    pub sigma_x: f64,
    pub sigma_v: f64,
}

impl GaussianComponent {
    pub fn standard(dim: usize) -> Self {
        Self { weight: 1.0, center_x: vec![0.0; dim], center_v: vec![0.0; dim], sigma_x: 1.0, sigma_v: 1.0 }
    }

    fn density(&self, x: &[f64], v: &[f64]) -> f64 {
        let d = x.len() as f64;
        let qx: f64 = x.iter().zip(&self.center_x).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (self.sigma_x * self.sigma_x);
        let qv: f64 = v.iter().zip(&self.center_v).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (self.sigma_v * self.sigma_v);
        let norm = (2.0 * std::f64::consts::PI * self.sigma_x * self.sigma_v).powf(d);
        (-(qx + qv) / 2.0).exp() / norm
    }
}

/// `f_{0,N} = (f_0 + h_0 1_{B_N}) / (1 + m_N)` with `f_0` the standard
/// Gaussian on `R^{2d}` and `|B_N| = c_0 / log N`, `m_N = h_0 |B_N|`.
///
/// `B_N` is the ball of radius `r_N` centred at `p + r_N e`: the balls are
/// nested, all tangent at `p`, and their intersection is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleFamily {
    pub n: u64,
    pub h0: f64,
    pub c0: f64,
    pub radius: f64,
    /// Centre of `B_N` in `R^{2d}`, positions first.
    pub center: Vec<f64>,
    pub mass: f64,
}

pub const EXAMPLE_H0: f64 = 0.25;
pub const EXAMPLE_C0: f64 = 1.0;

impl ExampleFamily {
    fn ball_mass_f0(&self) -> f64 {
        noncentral_chi2_cdf(self.center.len(), norm2(&self.center), self.radius * self.radius)
    }

    fn in_ball(&self, z: &[f64]) -> bool {
        z.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() < self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityKind {
    /// Mixture of isotropic Gaussian products; a single component is the
    /// plain Gaussian product.
    GaussianProduct { components: Vec<GaussianComponent> },
    /// The fixed reference `f_0 = (2 pi)^{-d} exp(-(|x|^2 + |v|^2)/2)`.
    SchwartzReference,
    ExampleFamily(ExampleFamily),
}

/// One-particle density with a Gaussian envelope
/// `f <= exp(-beta0 (E_1 + I_1) - mu0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub dim: usize,
    pub kind: DensityKind,
    pub beta0: f64,
    pub mu0: f64,
}

impl DensitySpec {
    pub fn reference(dim: usize) -> Self {
        let mu0 = dim as f64 * (2.0 * std::f64::consts::PI).ln();
        Self { dim, kind: DensityKind::SchwartzReference, beta0: 1.0, mu0 }
    }

    pub fn gaussian_mixture(dim: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("empty mixture"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0) || c.center_x.len() != dim || c.center_v.len() != dim || !(c.sigma_x > 0.0) || !(c.sigma_v > 0.0)) {
            return Err(Error::invalid("malformed mixture component"));
        }
        let components: Vec<GaussianComponent> = components.into_iter().map(|mut c| {
            c.weight /= total;
            c
        }).collect();
        // Envelope: beta0 = min 1/(2 sigma^2) over components, mu0 from the
        // worst-case prefactor (the centre shift costs a factor exp(beta |c|^2)).
        let beta0 = components.iter().map(|c| 0.5 / c.sigma_x.max(c.sigma_v).powi(2)).fold(f64::INFINITY, f64::min);
        let mut sup = 0.0;
        for c in &components {
            let shift2 = norm2(&c.center_x) + norm2(&c.center_v);
            let pref = c.weight / (2.0 * std::f64::consts::PI * c.sigma_x * c.sigma_v).powf(dim as f64);
            sup += pref * (beta0 * shift2).exp();
        }
        Ok(Self { dim, kind: DensityKind::GaussianProduct { components }, beta0, mu0: -f64::ln(sup) })
    }

    /// The example family member for `N`.
    pub fn example_family(dim: usize, n: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("example family needs N >= 2"));
        }
        let nn = 2 * dim;
        let measure = EXAMPLE_C0 / (n as f64).ln();
        let radius = (measure / ball_volume(nn)).powf(1.0 / nn as f64);
        // Tangent point p = (1, 0, .., 0), e = first axis.
        let mut center = vec![0.0; nn];
        center[0] = 1.0 + radius;
        let fam = ExampleFamily { n, h0: EXAMPLE_H0, c0: EXAMPLE_C0, radius, center, mass: EXAMPLE_H0 * measure };
        let far = 1.0 + 2.0 * radius;
        let sup = ((2.0 * std::f64::consts::PI).powf(-(dim as f64)) + fam.h0 * (far * far / 2.0).exp()) / (1.0 + fam.mass);
        Ok(Self { dim, kind: DensityKind::ExampleFamily(fam), beta0: 1.0, mu0: -sup.ln() })
    }

    pub fn density(&self, x: &[f64], v: &[f64]) -> f64 {
        match &self.kind {
            DensityKind::SchwartzReference => GaussianComponent::standard(self.dim).density(x, v),
            DensityKind::GaussianProduct { components } => components.iter().map(|c| c.weight * c.density(x, v)).sum(),
            DensityKind::ExampleFamily(fam) => {
                let f0 = GaussianComponent::standard(self.dim).density(x, v);
                let z: Vec<f64> = x.iter().chain(v).copied().collect();
                let bump = if fam.in_ball(&z) { fam.h0 } else { 0.0 };
                (f0 + bump) / (1.0 + fam.mass)
            }
        }
    }

    /// `f^{otimes s}(Z_s)`.
    pub fn tensor_density(&self, z: &Configuration) -> f64 {
        (0..z.count()).map(|i| self.density(z.position(i), z.velocity(i))).product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        match &self.kind {
            DensityKind::SchwartzReference => (gaussian_vec(rng, d, 1.0), gaussian_vec(rng, d, 1.0)),
            DensityKind::GaussianProduct { components } => {
                let mut u: f64 = rng.random();
                let mut pick = &components[components.len() - 1];
                for c in components {
                    if u < c.weight {
                        pick = c;
                        break;
                    }
                    u -= c.weight;
                }
                let x = gaussian_vec(rng, d, pick.sigma_x).iter().zip(&pick.center_x).map(|(a, c)| a + c).collect();
                let v = gaussian_vec(rng, d, pick.sigma_v).iter().zip(&pick.center_v).map(|(a, c)| a + c).collect();
                (x, v)
            }
            DensityKind::ExampleFamily(fam) => {
                if rng.random::<f64>() * (1.0 + fam.mass) < 1.0 {
                    (gaussian_vec(rng, d, 1.0), gaussian_vec(rng, d, 1.0))
                } else {
                    let z = uniform_in_ball(rng, &fam.center, fam.radius);
                    (z[..d].to_vec(), z[d..].to_vec())
                }
            }
        }
    }

    /// `||f - f_0||_{L^1}` against the standard Gaussian, in closed form for
    /// the example family.
    pub fn l1_distance_to_reference(&self) -> Option<f64> {
        match &self.kind {
            DensityKind::SchwartzReference => Some(0.0),
            DensityKind::ExampleFamily(fam) => Some(2.0 * fam.mass * (1.0 - fam.ball_mass_f0()) / (1.0 + fam.mass)),
            DensityKind::GaussianProduct { .. } => None,
        }
    }

    /// `int_{|z|^2 <= rho2} |f - f_0|`, for a bump ball inside the region.
    pub fn restricted_l1_distance_to_reference(&self, rho2: f64) -> Option<f64> {
        match &self.kind {
            DensityKind::SchwartzReference => Some(0.0),
            DensityKind::ExampleFamily(fam) => {
                let far = norm(&fam.center) + fam.radius;
                if far * far > rho2 {
                    return None;
                }
                let f_region = gamma_lr(self.dim as f64, rho2 / 2.0);
                let f_b = fam.ball_mass_f0();
                // Inside B: (h0 - m f0)/(1+m) > 0; outside: m f0/(1+m).
                Some(fam.mass * (1.0 + f_region - 2.0 * f_b) / (1.0 + fam.mass))
            }
            DensityKind::GaussianProduct { .. } => None,
        }
    }

    /// `sup |f - f_0|` in closed form for the example family.
    pub fn sup_gap_to_reference(&self) -> Option<f64> {
        match &self.kind {
            DensityKind::SchwartzReference => Some(0.0),
            DensityKind::ExampleFamily(fam) => {
                let peak = (2.0 * std::f64::consts::PI).powf(-(self.dim as f64));
                let far = norm(&fam.center) + fam.radius;
                let f0_min_b = peak * (-far * far / 2.0).exp();
                let inside = (fam.h0 - fam.mass * f0_min_b) / (1.0 + fam.mass);
                let outside = fam.mass * peak / (1.0 + fam.mass);
                Some(inside.max(outside))
            }
            DensityKind::GaussianProduct { .. } => None,
        }
    }
}

fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let n = center.len();
    let dir = crate::rng::unit_sphere(rng, n);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    dir.iter().zip(center).map(|(u, c)| c + r * u).collect()
}

/// `P(|Y|^2 <= x)` for `Y ~ N(c, I_n)` with `|c|^2 = lambda`, as a
/// Poisson mixture of central chi-square laws.
pub fn noncentral_chi2_cdf(n: usize, lambda: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let half = lambda / 2.0;
    if half == 0.0 {
        return gamma_lr(n as f64 / 2.0, x / 2.0);
    }
    let jmax = (half + 20.0 * half.sqrt() + 60.0) as usize;
    let mut acc = 0.0;
    for j in 0..=jmax {
        let lw = -half + j as f64 * half.ln() - ln_gamma(j as f64 + 1.0);
        acc += lw.exp() * gamma_lr(n as f64 / 2.0 + j as f64, x / 2.0);
    }
    acc.min(1.0)
}

/// Boltzmann-Grad parameters stored exactly: `N eps^{d-1} = 1 / ell`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scaling {
    pub dim: usize,
    pub n: u64,
    #[serde(serialize_with = "ser_ratio")]
    pub ell: Ratio<i128>,
    /// `eps^{d-1}`.
    #[serde(serialize_with = "ser_ratio")]
    pub eps_pow: Ratio<i128>,
}

fn ser_ratio<S: serde::Serializer>(r: &Ratio<i128>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

impl Scaling {
    pub fn new(dim: usize, n: u64, ell: Ratio<i128>) -> Result<Self> {
        if dim < 2 || n == 0 || ell <= Ratio::from_integer(0) {
            return Err(Error::invalid("scaling needs d >= 2, N >= 1, ell > 0"));
        }
        let eps_pow = (ell * Ratio::from_integer(n as i128)).recip();
        Ok(Self { dim, n, ell, eps_pow })
    }

    /// Exact check of `N eps^{d-1} ell = 1`.
    pub fn holds(&self) -> bool {
        self.eps_pow * self.ell * Ratio::from_integer(self.n as i128) == Ratio::from_integer(1)
    }

    pub fn epsilon(&self) -> f64 {
        let p = *self.eps_pow.numer() as f64 / *self.eps_pow.denom() as f64;
        p.powf(1.0 / (self.dim - 1) as f64)
    }

    pub fn ell_f64(&self) -> f64 {
        *self.ell.numer() as f64 / *self.ell.denom() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    /// Attempts without an acceptance before giving up; the default window
    /// corresponds to an acceptance rate below `1e-6`.
    pub window: u64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { window: 1_000_000 }
    }
}

/// One exact draw of `Z_N^{-1} f^{otimes N} 1_{D_N}` by rejection, with the
/// number of attempts used.
pub fn sample_conditioned(spec: &DensitySpec, n: usize, eps: f64, rng: &mut SimRng, opts: &SamplerOptions) -> Result<(Configuration, u64)> {
    if n == 0 || !(eps > 0.0) {
        return Err(Error::invalid("need N >= 1 and eps > 0"));
    }
    let mut attempts = 0u64;
    loop {
        attempts += 1;
        if let Some(c) = attempt(spec, n, eps, rng) {
            return Ok((c, attempts));
        }
        if attempts >= opts.window {
            return Err(Error::DensityTooConcentrated { rate: 0.0, trials: attempts });
        }
    }
}

/// Draws particles one at a time and abandons the tuple at the first overlap.
/// The accepted law is that of a full i.i.d. tuple conditioned on exclusion.
fn attempt(spec: &DensitySpec, n: usize, eps: f64, rng: &mut SimRng) -> Option<Configuration> {
    let d = spec.dim;
    let mut grid: std::collections::HashMap<Vec<i64>, Vec<usize>> = std::collections::HashMap::new();
    let mut xs: Vec<f64> = Vec::with_capacity(n * d);
    let mut vs: Vec<f64> = Vec::with_capacity(n * d);
    let lim = eps * (1.0 - crate::tolerances::TOL_OVERLAP);
    for i in 0..n {
        let (x, v) = spec.sample(rng);
        let key: Vec<i64> = x.iter().map(|c| (c / eps).floor() as i64).collect();
        let mut offset = vec![-1i64; d];
        loop {
            let k: Vec<i64> = key.iter().zip(&offset).map(|(a, b)| a + b).collect();
            if let Some(members) = grid.get(&k) {
                for &j in members {
                    let r2: f64 = x.iter().zip(&xs[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
                    if r2 < lim * lim {
                        return None;
                    }
                }
            }
            if !crate::dynamics::next_offset(&mut offset) {
                break;
            }
        }
        grid.entry(key).or_default().push(i);
        xs.extend_from_slice(&x);
        vs.extend_from_slice(&v);
    }
    Some(Configuration::from_parts(d, eps, xs, vs).expect("finite samples"))
}

/// Monte Carlo estimate of `Z_N`: the probability that an i.i.d. tuple
/// satisfies exclusion.
pub fn normalization_estimate(spec: &DensitySpec, n: usize, eps: f64, trials: usize, seed: u64) -> Estimate {
    if n <= 1 {
        return Estimate::exact(1.0);
    }
    let hits: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k as u64);
            let x: Vec<f64> = (0..n).flat_map(|_| spec.sample(&mut rng).0).collect();
            let c = Configuration::from_parts(spec.dim, eps, x, vec![0.0; n * spec.dim]).expect("finite samples");
            if c.is_valid() { 1.0 } else { 0.0 }
        })
        .collect();
    let p = hits.iter().sum::<f64>() / trials as f64;
    Estimate { mean: p, stderr: (p * (1.0 - p) / trials as f64).sqrt(), samples: trials }
}

/// Independent initial configurations of one experiment.
#[derive(Debug, Clone)]
pub struct EnsembleSample {
    pub runs: Vec<(u64, Configuration)>,
    pub scaling: Scaling,
    pub master_seed: u64,
    /// Total rejection attempts over all runs.
    pub attempts: u64,
}

/// `runs` conditioned samples; run `k` uses stream `k` of `master_seed`.
pub fn build_ensemble(spec: &DensitySpec, scaling: &Scaling, runs: usize, master_seed: u64, opts: &SamplerOptions) -> Result<EnsembleSample> {
    if !scaling.holds() || scaling.dim != spec.dim {
        return Err(Error::invalid("inconsistent scaling"));
    }
    let eps = scaling.epsilon();
    let n = scaling.n as usize;
    let out: Vec<Result<(u64, Configuration, u64)>> = (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(master_seed, k);
            sample_conditioned(spec, n, eps, &mut rng, opts).map(|(c, a)| (k, c, a))
        })
        .collect();
    let mut runs_out = Vec::with_capacity(runs);
    let mut attempts = 0;
    for r in out {
        let (k, c, a) = r?;
        attempts += a;
        runs_out.push((k, c));
    }
    Ok(EnsembleSample { runs: runs_out, scaling: scaling.clone(), master_seed, attempts })
}

/// Weak estimate of a marginal: `int test f_N^{(s)}(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TupleStatistic {
    pub order: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Ordered distinct `s`-tuples of `0..n`.
pub fn ordered_tuples(n: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(s);
    let mut used = vec![false; n];
    fn rec(n: usize, s: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == s {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, s, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    rec(n, s, &mut cur, &mut used, &mut out);
    out
}

/// `(N-s)!/N! sum over ordered distinct tuples of test(Z_tuple)` for one
/// configuration.
pub fn tuple_average<F>(z: &Configuration, s: usize, test: &F) -> f64
where
    F: Fn(&Configuration) -> f64 + ?Sized,
{
    let n = z.count();
    let vals: Vec<f64> = ordered_tuples(n, s).iter().map(|t| test(&z.select(t))).collect();
    let count = vals.len() as f64;
    crate::stats::pairwise_sum(&vals) / count
}

/// Flows every run to `t` and averages the symmetrised `test` over `s`-tuples.
pub fn estimate_tuple_statistic<F>(ensemble: &EnsembleSample, t: f64, test: &F, s: usize) -> Result<TupleStatistic>
where
    F: Fn(&Configuration) -> f64 + Sync + ?Sized,
{
    let n = ensemble.scaling.n as usize;
    if s == 0 || s > n {
        return Err(Error::invalid(format!("tuple order {s} outside 1..={n}")));
    }
    let vals: Vec<Result<f64>> = ensemble
        .runs
        .par_iter()
        .map(|(_, z)| {
            let zt = if t == 0.0 { z.clone() } else { flow(z, t)?.final_state };
            Ok(tuple_average(&zt, s, test))
        })
        .collect();
    let vals = vals.into_iter().collect::<Result<Vec<f64>>>()?;
    let e = Estimate::from_samples(&vals);
    Ok(TupleStatistic { order: s, estimate: e.mean, stderr: e.stderr, samples: e.samples })
}

/// Rows `t,statistic_name,estimate,stderr,runs`.
pub fn statistics_csv(rows: &[(f64, String, TupleStatistic)]) -> String {
    let mut out = String::from("t,statistic_name,estimate,stderr,runs\n");
    for (t, name, st) in rows {
        out.push_str(&format!("{t:?},{name},{:?},{:?},{}\n", st.estimate, st.stderr, st.samples));
    }
    out
}
