//! The truncated Duhamel series at `s = 1` against a direct ensemble
//! estimate of the one-particle marginal, for a tiny system.

use bglab::ensembles::{build_ensemble, estimate_tuple_statistic, DensitySpec, GaussianComponent, SamplerOptions, Scaling};
use bglab::pseudo::{duhamel_point_value, DataSource, DuhamelOptions};
use bglab::rng::{gaussian_vec, stream};
use bglab::stats::Estimate;
use bglab::Configuration;
use num_rational::Ratio;
use rayon::prelude::*;

fn beams() -> DensitySpec {
    let beam = |x: f64, v: f64| GaussianComponent { weight: 1.0, center_x: vec![x, 0.0], center_v: vec![v, 0.0], sigma_x: 0.25, sigma_v: 0.3 };
    DensitySpec::gaussian_mixture(2, vec![beam(-0.3, 1.0), beam(0.3, -1.0)]).unwrap()
}

/// Localized second moment of the first velocity component.
fn test_fn(x: &[f64], v: &[f64]) -> f64 {
    (-(x[0] * x[0] + x[1] * x[1]) / 0.2).exp() * v[1] * v[1]
}

fn gauss(z: &[f64], sigma: f64) -> f64 {
    let q: f64 = z.iter().map(|c| c * c).sum();
    (-q / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).powf(z.len() as f64 / 2.0)
}

#[test]
fn one_creation_series_matches_ensemble_at_n3() {
    let spec = beams();
    let n = 3u64;
    // N eps ell = 1 with eps = 1/20.
    let scaling = Scaling::new(2, n, Ratio::new(20, 3)).unwrap();
    let eps = scaling.epsilon();
    assert!((eps - 0.05).abs() < 1e-12);
    let t = 0.3;

    let ensemble = build_ensemble(&spec, &scaling, 40_000, 11, &SamplerOptions::default()).unwrap();
    let direct = estimate_tuple_statistic(&ensemble, t, &|z: &Configuration| test_fn(z.position(0), z.velocity(0)), 1).unwrap();

    // Importance sampling of int test(z) f_N^(1)(t, z) dz with Gaussian proposals.
    let (sx, sv) = (0.35, 1.2);
    let series = |depth: usize| -> Estimate {
        let opts = DuhamelOptions::new(n, depth, 16, 5);
        let vals: Vec<f64> = (0..100_000u64)
            .into_par_iter()
            .map(|m| {
                let mut rng = stream(21, m);
                let x = gaussian_vec(&mut rng, 2, sx);
                let v = gaussian_vec(&mut rng, 2, sv);
                let q = gauss(&x, sx) * gauss(&v, sv);
                let z = Configuration::new(2, eps, x.clone(), v.clone()).unwrap();
                let f = duhamel_point_value(&z, t, &DataSource::Tensorized(spec.clone()), &DuhamelOptions { seed: m, ..opts }).unwrap().value;
                test_fn(&x, &v) * f / q
            })
            .collect();
        Estimate::from_samples(&vals)
    };
    let one = series(1);
    let free = series(0);
    let combined = (one.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
    println!("ensemble {:.5} +- {:.5}, series n=1 {:.5} +- {:.5}, free {:.5}", direct.estimate, direct.stderr, one.mean, one.stderr, free.mean);
    assert!((one.mean - direct.estimate).abs() <= 3.0 * combined);
    // The collision term is resolved: free transport alone is far off.
    let free_se = (free.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
    assert!((free.mean - direct.estimate).abs() > 5.0 * free_se);
}
