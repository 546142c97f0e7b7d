//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//!
//! Runs at the pinned tolerances and default budgets of the experiment
//! suites.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use bglab::experiments::{
    chaos_run, dsmc_sanity, duality_check, flow_validate, hat_probe, jacobian_check, singular_scaling, ChaosRunConfig, DsmcSanityConfig, DualityConfig,
    FlowValidateConfig, HatProbeConfig, JacobianConfig, Outcome, ScalingConfig,
};
use bglab::experiments::witness_agreement;
use bglab::Result;

const SEED: u64 = 2024;

/// Pass iff every predicate whose name starts with one of `prefixes` passes
/// and at least one matches.
fn verdict(out: &Outcome, prefixes: &[&str]) -> (bool, String) {
    let sel: Vec<_> = out.predicates.iter().filter(|p| prefixes.iter().any(|q| p.name.starts_with(q))).collect();
    let ok = !sel.is_empty() && sel.iter().all(|p| p.passed);
    let detail = sel.iter().map(|p| format!("{} [{}]", p.name, p.detail)).collect::<Vec<_>>().join("; ");
    (ok, detail)
}

fn c1() -> Result<(bool, String)> {
    let out = flow_validate(&FlowValidateConfig::default(), SEED)?;
    Ok(verdict(&out, &["conservation", "reversibility", "flow_jacobian"]))
}

fn c2() -> Result<(bool, String)> {
    let out = duality_check(&DualityConfig::default(), SEED)?;
    Ok(verdict(&out, &["duality_N"]))
}

fn hat_outcome() -> Result<&'static Outcome> {
    static CELL: OnceLock<Outcome> = OnceLock::new();
    if let Some(o) = CELL.get() {
        return Ok(o);
    }
    let out = hat_probe(&HatProbeConfig::default(), SEED)?;
    Ok(CELL.get_or_init(|| out))
}

fn c3() -> Result<(bool, String)> {
    Ok(verdict(hat_outcome()?, &["comparison", "envelope_sandwich"]))
}

fn c4() -> Result<(bool, String)> {
    Ok(verdict(hat_outcome()?, &["hat_monotone", "hat_divisible", "hat_upper_bound", "restart_support"]))
}

fn c5() -> Result<(bool, String)> {
    let out = jacobian_check(&JacobianConfig::default(), SEED)?;
    Ok(verdict(&out, &["jacobian_k"]))
}

fn c6() -> Result<(bool, String)> {
    let cfg = ScalingConfig { witness_positives: 0, ..ScalingConfig::default() };
    let out = singular_scaling(&cfg, SEED)?;
    Ok(verdict(&out, &["slope_", "sandwich_"]))
}

fn c7() -> Result<(bool, String)> {
    let (_, agree, total) = witness_agreement(&ScalingConfig::default(), SEED)?;
    Ok((agree == total && total >= 1000, format!("{agree}/{total} constructed endpoints agree")))
}

fn c8() -> Result<(bool, String)> {
    let cfg = ChaosRunConfig { dsmc: DsmcSanityConfig { steps: 10, ..DsmcSanityConfig::default() }, ..ChaosRunConfig::default() };
    let out = chaos_run(&cfg, SEED)?;
    Ok(verdict(&out, &["trend_", "sup_gap"]))
}

fn c9() -> Result<(bool, String)> {
    let out = dsmc_sanity(&DsmcSanityConfig::default(), SEED)?;
    Ok(verdict(&out, &["dsmc_"]))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<(bool, String)>); 9] = [
        ("dynamics exactness", c1),
        ("duality identity", c2),
        ("comparison principle and envelope sandwich", c3),
        ("comparison-hierarchy structure", c4),
        ("pseudo-trajectory Jacobian identity", c5),
        ("singular-set scaling", c6),
        ("V/W cross-validation", c7),
        ("chaos trend along N", c8),
        ("DSMC sanity", c9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!("criterion {} {name}: {} ({:.1}s) {detail}", i + 1, if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
