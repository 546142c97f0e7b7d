use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use bglab::experiments::{run, write_run, ExperimentConfig, Manifest};

#[derive(Parser)]
#[command(name = "bglab", version, about = "Hard-sphere Boltzmann-Grad laboratory experiments")]
struct Cli {
    /// TOML experiment configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "BGLAB_JOBS")]
    jobs: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conservation, reversibility and the flow Jacobian.
    FlowValidate(FlowArgs),
    /// Duality residuals on random cells.
    DualityCheck(DualityArgs),
    /// Comparison-hierarchy property suite.
    HatProbe(HatArgs),
    /// Singular-set measure scaling in epsilon.
    SingularScaling(ScalingArgs),
    /// Pseudo-trajectory Jacobian identity.
    JacobianCheck(JacobianArgs),
    /// Chaos seminorm trend along N and DSMC sanity.
    ChaosRun(ChaosArgs),
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    min_events: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct DualityArgs {
    #[arg(long = "N", value_delimiter = ',')]
    n: Option<Vec<u64>>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct HatArgs {
    #[arg(long = "N")]
    n: Option<u64>,
    #[arg(long)]
    probes: Option<usize>,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct JacobianArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    trajectories: Option<usize>,
}

#[derive(Args)]
struct ChaosArgs {
    #[arg(long = "N", value_delimiter = ',')]
    n: Option<Vec<u64>>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FlowValidate(_) => "flow-validate",
            Command::DualityCheck(_) => "duality-check",
            Command::HatProbe(_) => "hat-probe",
            Command::SingularScaling(_) => "singular-scaling",
            Command::JacobianCheck(_) => "jacobian-check",
            Command::ChaosRun(_) => "chaos-run",
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), String> {
        match self {
            Command::FlowValidate(a) => {
                let c = &mut cfg.flow_validate;
                if let Some(d) = &a.dims {
                    let sides: Vec<usize> = d.iter().map(|&dim| if dim == 2 { 16 } else { 8 }).collect();
                    c.dims.clone_from(d);
                    c.lattice_sides = sides;
                }
                set(&mut c.min_events, a.min_events);
                set(&mut c.reversibility_trials, a.trials);
            }
            Command::DualityCheck(a) => {
                let c = &mut cfg.duality_check;
                if let Some(n) = &a.n {
                    c.ns.clone_from(n);
                }
                set(&mut c.cells, a.cells);
                set(&mut c.runs, a.runs);
            }
            Command::HatProbe(a) => {
                set(&mut cfg.hat_probe.n, a.n);
                set(&mut cfg.hat_probe.probes, a.probes);
            }
            Command::SingularScaling(a) => {
                let c = &mut cfg.singular_scaling;
                match (a.s, a.k) {
                    (Some(s), Some(k)) => c.pairs = vec![(s, k)],
                    (None, None) => {}
                    _ => return Err("--s and --k go together".into()),
                }
                set(&mut c.samples, a.samples);
            }
            Command::JacobianCheck(a) => {
                let c = &mut cfg.jacobian_check;
                if let Some(k) = a.k {
                    let tol = c.ks.iter().find(|p| p.0 == k).map_or(1e-3, |p| p.1);
                    c.ks = vec![(k, tol)];
                }
                set(&mut c.trajectories, a.trajectories);
            }
            Command::ChaosRun(a) => {
                let c = &mut cfg.chaos_run;
                if let Some(n) = &a.n {
                    c.experiment.ns.clone_from(n);
                }
                set(&mut c.experiment.outer_samples, a.outer);
                set(&mut c.experiment.inner_samples, a.inner);
                set(&mut c.experiment.dsmc_particles, a.particles);
            }
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| ExperimentConfig::from_toml(&t).map_err(|e| e.to_string())) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    if let Err(e) = cli.command.apply(&mut cfg) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let name = cli.command.name();
    if cli.print_config {
        match cfg.to_toml() {
            Ok(t) => print!("{t}"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
        return ExitCode::SUCCESS;
    }
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    let started = now();
    let outcome = match run(name, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            return ExitCode::from(2);
        }
    };
    let manifest = Manifest::new(name, &cfg, &outcome, jobs, started, now());
    let dir = cli.out.join(format!("{name}-{}", cfg.seed));
    if let Err(e) = write_run(&dir, &outcome, &manifest) {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::from(2);
    }
    if let Ok(t) = cfg.to_toml() {
        let _ = std::fs::write(dir.join("config.toml"), t);
    }
    for p in &outcome.predicates {
        println!("{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
    }
    println!("wrote {}", dir.display());
    if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
