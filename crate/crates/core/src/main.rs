use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcnsim::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "dcnsim", about = "Decentralized cubic Newton simulator", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment; exit code 0 iff the target gap was achieved.
    Run(RunArgs),
    /// Align traces by iteration and by communication cost.
    Compare(CompareArgs),
    /// Run the built-in invariant suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for trace.csv / params.json / suite.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// dcn-convex | dcn-sc | adcn
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    /// analytic | adaptive
    #[arg(long)]
    mode: Option<String>,
    /// dense | glm | glm-topk:K
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// trace.csv files produced by `run`.
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Built-in default experiment: strongly convex quadratic suite on a ring.
fn default_config() -> RunConfig {
    harness::RunConfig {
        suite: dcnsim::objectives::SuiteSpec {
            family: dcnsim::objectives::SuiteFamily::Quadratic {
                l1: 10.0,
                mu: 1.0,
                singular_fraction: 0.0,
                b_scale: 1.0,
            },
            nodes: 8,
            dim: 10,
            heterogeneity: 0.5,
        },
        topology: dcnsim::network::TopologyKind::Static {
            shape: dcnsim::network::StaticShape::Ring,
        },
        algo: harness::Algo::DcnSc,
        eps: 1e-6,
        mode: harness::Mode::Adaptive,
        backend: "dense".into(),
        seed: 0,
        x0_scale: 1.0,
        eps_ref: 1e-12,
        solver_tol: 1e-10,
        chebyshev: false,
        contraction_trials: 8,
        l_reg: None,
        out_dir: None,
    }
}

fn cmd_run(args: RunArgs) -> dcnsim::Result<bool> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => default_config(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.display().to_string());
    }
    if let Some(algo) = &args.algo {
        config.algo = algo.parse()?;
    }
    if let Some(eps) = args.eps {
        config.eps = eps;
    }
    if let Some(mode) = &args.mode {
        config.mode = mode.parse()?;
    }
    if let Some(backend) = &args.backend {
        harness::BackendChoice::parse(backend)?;
        config.backend = backend.clone();
    }

    let out = harness::run(&config)?;
    let last = out.trace.rows.last();
    eprintln!(
        "final gap {:.3e} after {} iterations, {} rounds, {:.3e} scalars ({:.2}s)",
        out.trace.final_gap(),
        last.map_or(0, |r| r.iter),
        last.map_or(0, |r| r.cum_rounds),
        last.map_or(0.0, |r| r.cum_scalars),
        last.map_or(0.0, |r| r.wall_time_s),
    );
    for f in &out.files {
        eprintln!("wrote {}", f.display());
    }
    if out.files.is_empty() {
        // No output directory: put the trace on stdout.
        print!("{}", out.trace.to_csv());
    }
    Ok(out.achieved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: dcnsim::Result<bool> = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Compare(args) => harness::compare(&args.traces).map(|cmp| {
            print!("{}", cmp.render());
            true
        }),
        Cmd::Check(args) => harness::check(args.seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("target not achieved");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
