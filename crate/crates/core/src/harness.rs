//! CLI-facing orchestration: run configuration, experiment assembly, the
//! per-iteration metrics trace (CSV), the resolved-parameter dump (JSON), the
//! trace comparator, and the self-check suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adcn::{schedule_accelerated, AdcnDriver};
use crate::consensus::{
    plan_rounds_acc, plan_rounds_convex, plan_rounds_sc, ConsensusEngine, DenseHessianAverager,
    HessianAverager, PlannedRounds,
};
use crate::dcn::{schedule_convex, schedule_strongly_convex, DcnDriver, DeltaMode, PlanningMode};
use crate::error::{Error, Result};
use crate::glm_comm::GlmHessianBackend;
use crate::network::{
    chebyshev_degree_for, chebyshev_operator, estimate_contraction, generate, TopologyKind,
    LAMBDA_SAFETY,
};
use crate::objectives::{make_suite, reference_solve, SuiteSpec};

// ---------------------------------------------------------------------------
// Metrics trace
// ---------------------------------------------------------------------------

/// One per-iteration record. Deltas are the measured consensus errors of this
/// iteration's calls (point/gradient/Hessian at the evaluation anchor, plus
/// the gradient-at-x call of the accelerated method).
#[derive(Clone, Debug, Serialize)]
pub struct IterationRow {
    pub iter: usize,
    pub f_gap: f64,
    pub f_gap_nodes_mean: f64,
    pub delta_point: f64,
    pub delta_grad: f64,
    pub delta_hess: f64,
    pub delta_grad_x: f64,
    pub delta1_used: f64,
    pub delta2_used: f64,
    pub rounds_point: usize,
    pub rounds_grad: usize,
    pub rounds_hess: usize,
    pub rounds_grad_x: usize,
    pub cum_rounds: usize,
    pub cum_scalars: f64,
    pub max_radius_x: f64,
    pub max_radius_y: f64,
    pub max_radius_v: f64,
    pub r_bar_ok: bool,
    /// Kept in memory for inspection; excluded from the CSV so trace files
    /// stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Frozen CSV schema, one column per field above (wall time excluded).
pub const CSV_COLUMNS: &[&str] = &[
    "iter",
    "f_gap",
    "f_gap_nodes_mean",
    "delta_point",
    "delta_grad",
    "delta_hess",
    "delta_grad_x",
    "delta1_used",
    "delta2_used",
    "rounds_point",
    "rounds_grad",
    "rounds_hess",
    "rounds_grad_x",
    "cum_rounds",
    "cum_scalars",
    "max_radius_x",
    "max_radius_y",
    "max_radius_v",
    "r_bar_ok",
];

#[derive(Clone, Debug)]
pub struct MetricsTrace {
    pub eps: f64,
    pub rows: Vec<IterationRow>,
}

impl MetricsTrace {
    pub fn new(eps: f64) -> Self {
        Self { eps, rows: Vec::new() }
    }

    /// Row 0: the common start before any iteration.
    pub fn push_initial(&mut self, gap0: f64, radius0: f64) {
        self.rows.push(IterationRow {
            iter: 0,
            f_gap: gap0,
            f_gap_nodes_mean: gap0,
            delta_point: 0.0,
            delta_grad: 0.0,
            delta_hess: 0.0,
            delta_grad_x: 0.0,
            delta1_used: 0.0,
            delta2_used: 0.0,
            rounds_point: 0,
            rounds_grad: 0,
            rounds_hess: 0,
            rounds_grad_x: 0,
            cum_rounds: 0,
            cum_scalars: 0.0,
            max_radius_x: radius0,
            max_radius_y: 0.0,
            max_radius_v: 0.0,
            r_bar_ok: true,
            wall_time_s: 0.0,
        });
    }

    pub fn push(&mut self, row: IterationRow) {
        debug_assert!(self.rows.last().map_or(true, |r| row.iter > r.iter));
        self.rows.push(row);
    }

    pub fn final_gap(&self) -> f64 {
        self.rows.last().map_or(f64::INFINITY, |r| r.f_gap)
    }

    pub fn achieved(&self) -> bool {
        self.final_gap() <= self.eps
    }

    /// First iterate index whose gap is at or below `eps`.
    pub fn first_iter_reaching(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.f_gap <= eps).map(|r| r.iter)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", CSV_COLUMNS.join(","));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                r.iter,
                r.f_gap,
                r.f_gap_nodes_mean,
                r.delta_point,
                r.delta_grad,
                r.delta_hess,
                r.delta_grad_x,
                r.delta1_used,
                r.delta2_used,
                r.rounds_point,
                r.rounds_grad,
                r.rounds_hess,
                r.rounds_grad_x,
                r.cum_rounds,
                r.cum_scalars,
                r.max_radius_x,
                r.max_radius_y,
                r.max_radius_v,
                if r.r_bar_ok { 1 } else { 0 },
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsTrace> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Argument("empty trace file".into()))?;
        if header != CSV_COLUMNS.join(",") {
            return Err(Error::Argument("trace header does not match the frozen schema".into()));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(Error::Argument(format!("bad field count on line {}", lineno + 2)));
            }
            let pf = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Argument(format!("bad float on line {}", lineno + 2)))
            };
            let pu = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Argument(format!("bad int on line {}", lineno + 2)))
            };
            rows.push(IterationRow {
                iter: pu(f[0])?,
                f_gap: pf(f[1])?,
                f_gap_nodes_mean: pf(f[2])?,
                delta_point: pf(f[3])?,
                delta_grad: pf(f[4])?,
                delta_hess: pf(f[5])?,
                delta_grad_x: pf(f[6])?,
                delta1_used: pf(f[7])?,
                delta2_used: pf(f[8])?,
                rounds_point: pu(f[9])?,
                rounds_grad: pu(f[10])?,
                rounds_hess: pu(f[11])?,
                rounds_grad_x: pu(f[12])?,
                cum_rounds: pu(f[13])?,
                cum_scalars: pf(f[14])?,
                max_radius_x: pf(f[15])?,
                max_radius_y: pf(f[16])?,
                max_radius_v: pf(f[17])?,
                r_bar_ok: f[18] == "1",
                wall_time_s: 0.0,
            });
        }
        Ok(MetricsTrace { eps: f64::NAN, rows })
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    DcnConvex,
    DcnSc,
    Adcn,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcn-convex" => Ok(Algo::DcnConvex),
            "dcn-sc" => Ok(Algo::DcnSc),
            "adcn" => Ok(Algo::Adcn),
            other => Err(Error::Config(format!("unknown algo '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Analytic,
    Adaptive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Mode::Analytic),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// `dense`, `glm`, or `glm-topk:K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendChoice {
    Dense,
    Glm { top_k: Option<usize> },
}

impl BackendChoice {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "dense" {
            return Ok(BackendChoice::Dense);
        }
        if s == "glm" {
            return Ok(BackendChoice::Glm { top_k: None });
        }
        if let Some(k) = s.strip_prefix("glm-topk:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad top-k count in backend '{s}'")))?;
            if k == 0 {
                return Err(Error::Config("top-k count must be at least 1".into()));
            }
            return Ok(BackendChoice::Glm { top_k: Some(k) });
        }
        Err(Error::Config(format!("unknown backend '{s}'")))
    }

    pub fn label(&self) -> String {
        match self {
            BackendChoice::Dense => "dense".into(),
            BackendChoice::Glm { top_k: None } => "glm".into(),
            BackendChoice::Glm { top_k: Some(k) } => format!("glm-topk:{k}"),
        }
    }
}

fn default_mode() -> Mode {
    Mode::Adaptive
}

fn default_backend() -> String {
    "dense".into()
}

fn default_eps_ref() -> f64 {
    1e-12
}

fn default_solver_tol() -> f64 {
    1e-10
}

fn default_contraction_trials() -> usize {
    8
}

fn default_x0_scale() -> f64 {
    1.0
}

/// One experiment, loadable from a JSON config file. Unknown keys are
/// rejected; CLI flags override individual fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteSpec,
    pub topology: TopologyKind,
    pub algo: Algo,
    pub eps: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub seed: u64,
    /// Common start x0 = x0_scale * (1, ..., 1).
    #[serde(default = "default_x0_scale")]
    pub x0_scale: f64,
    #[serde(default = "default_eps_ref")]
    pub eps_ref: f64,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    /// Replace plain mixing with Chebyshev super-rounds (static graphs only).
    #[serde(default)]
    pub chebyshev: bool,
    #[serde(default = "default_contraction_trials")]
    pub contraction_trials: usize,
    /// Cubic coefficient for the basic method; defaults to L2bar.
    #[serde(default)]
    pub l_reg: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

pub struct RunOutput {
    pub trace: MetricsTrace,
    pub params: serde_json::Value,
    pub achieved: bool,
    /// Paths written when out_dir was set.
    pub files: Vec<PathBuf>,
}

/// Build suite -> reference solve -> topology -> schedule -> algorithm run.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let backend_choice = BackendChoice::parse(&config.backend)?;
    let suite = make_suite(&config.suite, config.seed)?;
    let m = suite.node_count();
    let d = suite.dim();
    let x0 = vec![config.x0_scale; d];
    let refsol = reference_solve(&suite, config.eps_ref, &x0)?;

    let mut schedule = generate(config.topology.clone(), m, config.seed)?;
    let tau = match &config.topology {
        TopologyKind::TauConnected { tau } => *tau,
        _ => 1,
    };
    let lambda_est = estimate_contraction(&schedule, tau, config.contraction_trials)?;
    let exact_lambda = schedule.is_static() && tau == 1;
    let lambda_used = if exact_lambda { lambda_est } else { LAMBDA_SAFETY * lambda_est };
    schedule.set_contraction(tau, lambda_used);

    let mut engine = ConsensusEngine::new(schedule);
    let mut cheb_degree = None;
    if config.chebyshev {
        let w = engine
            .schedule()
            .static_matrix()
            .ok_or_else(|| Error::Config("chebyshev mixing needs a static topology".into()))?
            .clone();
        let k = chebyshev_degree_for(&w);
        let op = chebyshev_operator(&w, k)?;
        cheb_degree = Some(k);
        engine = ConsensusEngine::new(engine.schedule().clone()).with_chebyshev(op);
    }

    let backend: Box<dyn HessianAverager> = match backend_choice {
        BackendChoice::Dense => Box::new(DenseHessianAverager),
        BackendChoice::Glm { top_k } => Box::new(GlmHessianBackend::new(&suite, &mut engine, top_k)?),
    };

    let eff_tau = engine.effective_tau();
    let eff_lambda = engine.effective_lambda();
    let (delta_mode, adaptive) = match config.mode {
        Mode::Analytic => (DeltaMode::Analytic, false),
        Mode::Adaptive => (DeltaMode::Adaptive, true),
    };

    let mut planned: Option<PlannedRounds> = None;
    let (trace, sched_json) = match config.algo {
        Algo::DcnConvex | Algo::DcnSc => {
            let l_reg = config.l_reg.unwrap_or_else(|| suite.l2_bar());
            let params = match config.algo {
                Algo::DcnConvex => schedule_convex(&refsol, &suite, config.eps, l_reg)?,
                _ => schedule_strongly_convex(&refsol, &suite, config.eps, l_reg, &x0)?,
            };
            let planning = if adaptive {
                PlanningMode::Adaptive
            } else {
                let plan = match config.algo {
                    Algo::DcnConvex => {
                        plan_rounds_convex(&refsol, &suite, &params.targets, eff_tau, eff_lambda)?
                    }
                    _ => plan_rounds_sc(&refsol, &suite, &params.targets, eff_tau, eff_lambda)?,
                };
                planned = Some(plan);
                PlanningMode::Analytic(plan)
            };
            let sched_json = json!({
                "n_iters": params.n_iters,
                "gamma": params.gamma,
                "delta1": params.delta1,
                "delta2": params.delta2,
                "l_reg": params.l_reg,
                "alpha": params.alpha,
                "targets": {
                    "point": params.targets.point,
                    "grad": params.targets.grad,
                    "hess": params.targets.hess,
                },
                "already_solved": params.already_solved,
            });
            let mut driver = DcnDriver {
                suite: &suite,
                refsol: &refsol,
                params,
                engine,
                backend,
                planning,
                delta_mode,
                solver_tol: config.solver_tol,
            };
            (driver.run(&x0)?, sched_json)
        }
        Algo::Adcn => {
            let params = schedule_accelerated(&refsol, &suite, config.eps, &x0)?;
            let planning = if adaptive {
                PlanningMode::Adaptive
            } else {
                let plan = plan_rounds_acc(&refsol, &suite, &params.targets, eff_tau, eff_lambda)?;
                planned = Some(plan);
                PlanningMode::Analytic(plan)
            };
            let sched_json = json!({
                "n_iters": params.n_iters,
                "alpha": params.alpha,
                "kappa2": params.kappa2,
                "kappa3": params.kappa3,
                "l_reg": params.l_reg,
                "delta2": params.delta2,
                "c_const": params.c_const,
                "r0": params.r0,
                "r_bar": params.r_bar,
                "targets": {
                    "point": params.targets.point,
                    "grad": params.targets.grad,
                    "hess": params.targets.hess,
                    "grad_x": params.targets.grad_x,
                },
                "already_solved": params.already_solved,
            });
            let mut driver = AdcnDriver {
                suite: &suite,
                refsol: &refsol,
                params,
                engine,
                backend,
                planning,
                delta_mode,
                solver_tol: config.solver_tol,
            };
            (driver.run(&x0)?, sched_json)
        }
    };

    let params_dump = json!({
        "schema_version": 1,
        "algo": config.algo,
        "eps": config.eps,
        "mode": config.mode,
        "backend": backend_choice.label(),
        "seed": config.seed,
        "suite": {
            "m": m,
            "d": d,
            "l1_bar": suite.l1_bar(),
            "l2_bar": suite.l2_bar(),
            "mu_bar": suite.mu_bar(),
            "mu_hat": suite.mu_hat(),
            "l1_max": suite.l1_max(),
            "l2_max": suite.l2_max(),
        },
        "reference": {
            "f_star": refsol.f_star,
            "d": refsol.d,
            "zeta_g": refsol.zeta_g,
            "zeta_h": refsol.zeta_h,
            "r_bar": refsol.r_bar,
        },
        "contraction": {
            "tau": eff_tau,
            "lambda_est": lambda_est,
            "lambda_used": eff_lambda,
            "chebyshev_degree": cheb_degree,
        },
        "schedule": sched_json,
        "rounds": planned,
    });

    let achieved = trace.achieved();
    let mut files = Vec::new();
    if let Some(dir) = &config.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        let trace_path = dir.join("trace.csv");
        std::fs::write(&trace_path, trace.to_csv())?;
        files.push(trace_path);
        let params_path = dir.join("params.json");
        std::fs::write(&params_path, format!("{:#}\n", params_dump))?;
        files.push(params_path);
        let suite_path = dir.join("suite.json");
        std::fs::write(&suite_path, serde_json::to_string_pretty(&suite)?)?;
        files.push(suite_path);
    }
    Ok(RunOutput { trace, params: params_dump, achieved, files })
}

// ---------------------------------------------------------------------------
// Compare
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TraceSummary {
    pub path: String,
    pub iterations: usize,
    pub final_gap: f64,
    pub total_rounds: usize,
    pub total_scalars: f64,
    /// Scheduled iteration count from the sibling params.json, when present.
    pub scheduled_n: Option<usize>,
    /// First iterate with gap below the sibling params.json target.
    pub first_iter_at_eps: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Comparison {
    pub summaries: Vec<TraceSummary>,
    /// iter -> one gap column per trace (None when a trace is shorter).
    pub by_iteration: Vec<(usize, Vec<Option<f64>>)>,
    /// cost -> best gap achieved at or below that cumulative scalar cost.
    pub by_cost: Vec<(f64, Vec<Option<f64>>)>,
}

/// Align traces by iteration and by cumulative communication cost.
pub fn compare(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.is_empty() {
        return Ok(Comparison::default());
    }
    let mut traces = Vec::new();
    let mut summaries = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p)?;
        let trace = MetricsTrace::from_csv(&text)?;
        let (scheduled_n, eps) = read_sibling_params(p);
        let last = trace.rows.last();
        summaries.push(TraceSummary {
            path: p.display().to_string(),
            iterations: last.map_or(0, |r| r.iter),
            final_gap: last.map_or(f64::NAN, |r| r.f_gap),
            total_rounds: last.map_or(0, |r| r.cum_rounds),
            total_scalars: last.map_or(0.0, |r| r.cum_scalars),
            scheduled_n,
            first_iter_at_eps: eps.and_then(|e| trace.first_iter_reaching(e)),
        });
        traces.push(trace);
    }

    let max_iter = traces.iter().map(|t| t.rows.last().map_or(0, |r| r.iter)).max().unwrap_or(0);
    let mut by_iteration = Vec::with_capacity(max_iter + 1);
    for it in 0..=max_iter {
        let gaps: Vec<Option<f64>> = traces
            .iter()
            .map(|t| t.rows.iter().find(|r| r.iter == it).map(|r| r.f_gap))
            .collect();
        by_iteration.push((it, gaps));
    }

    let mut grid: Vec<f64> =
        traces.iter().flat_map(|t| t.rows.iter().map(|r| r.cum_scalars)).collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut by_cost = Vec::with_capacity(grid.len());
    for c in grid {
        let gaps: Vec<Option<f64>> = traces
            .iter()
            .map(|t| {
                t.rows
                    .iter()
                    .filter(|r| r.cum_scalars <= c)
                    .map(|r| r.f_gap)
                    .fold(None, |best: Option<f64>, g| Some(best.map_or(g, |b| b.min(g))))
            })
            .collect();
        by_cost.push((c, gaps));
    }
    Ok(Comparison { summaries, by_iteration, by_cost })
}

fn read_sibling_params(trace_path: &Path) -> (Option<usize>, Option<f64>) {
    let params_path = trace_path.parent().map(|d| d.join("params.json"));
    let Some(pp) = params_path else { return (None, None) };
    let Ok(text) = std::fs::read_to_string(pp) else { return (None, None) };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else { return (None, None) };
    let n = v.pointer("/schedule/n_iters").and_then(|x| x.as_u64()).map(|x| x as usize);
    let eps = v.pointer("/eps").and_then(|x| x.as_f64());
    (n, eps)
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.summaries.is_empty() {
            let _ = writeln!(out, "no traces");
            return out;
        }
        let _ = writeln!(
            out,
            "{:<40} {:>6} {:>12} {:>10} {:>14} {:>8} {:>8}",
            "trace", "iters", "final_gap", "rounds", "scalars", "sched_N", "hit_eps"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<40} {:>6} {:>12.3e} {:>10} {:>14.3e} {:>8} {:>8}",
                s.path,
                s.iterations,
                s.final_gap,
                s.total_rounds,
                s.total_scalars,
                s.scheduled_n.map_or("-".into(), |n| n.to_string()),
                s.first_iter_at_eps.map_or("-".into(), |n| n.to_string()),
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Check
// ---------------------------------------------------------------------------

/// Compact invariant sweep: oracle finite differences, mixing-matrix
/// stochasticity, consensus contraction, cubic-solver stationarity, and the
/// estimating-function minimizer. Prints one line per group.
pub fn check(seed: u64) -> Result<bool> {
    use crate::objectives::{finite_difference_check, SuiteFamily};
    let mut all_ok = true;
    let mut report = |name: &str, ok: bool| {
        println!("check {name}: {}", if ok { "ok" } else { "FAILED" });
        all_ok &= ok;
    };

    // Oracles.
    let spec = SuiteSpec {
        family: SuiteFamily::GlmLogistic { samples_per_node: 5, feature_scale: 1.2, mu_reg: 0.1 },
        nodes: 4,
        dim: 6,
        heterogeneity: 0.7,
    };
    let suite = make_suite(&spec, seed)?;
    let mut ok = true;
    for o in suite.objectives() {
        let rep = finite_difference_check(o, &[0.3; 6], 1e-5)?;
        ok &= rep.grad_rel_err <= 1e-5 && rep.hess_rel_err <= 1e-4;
    }
    report("finite-differences", ok);

    // Mixing matrices.
    let mut ok = true;
    for m in [2usize, 5, 9] {
        let g = crate::network::GraphSnapshot::ring(m);
        let w = crate::network::MixingMatrix::metropolis(&g);
        ok &= w.validate(&g).is_ok();
    }
    report("metropolis-stochasticity", ok);

    // Contraction on a ring of 8.
    let mut sched =
        generate(TopologyKind::Static { shape: crate::network::StaticShape::Ring }, 8, seed)?;
    let lam = estimate_contraction(&sched, 1, 1)?;
    sched.set_contraction(1, lam);
    let mut ok = lam > 0.0 && lam < 1.0;
    {
        use crate::consensus::{rounds_for, run, StackLabel, Stacked};
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> =
                (0..8).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let u = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
            let (_, frob) = u.deviation();
            let t = rounds_for(frob, 1e-6, 1, lam)?;
            let (_, rep) = run(&u, &sched, 0, t);
            ok &= rep.max_row_deviation <= 1e-6;
        }
    }
    report("consensus-contraction", ok);

    // Cubic solver.
    let mut ok = true;
    {
        use crate::cubic::{solve_cubic, CubicModel};
        use crate::linalg::{norm2, Matrix};
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..25 {
            let d = rng.random_range(1..10usize);
            let mut h = Matrix::zeros(d, d);
            for i in 0..d {
                for j in i..d {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    h.set(i, j, v);
                    h.set(j, i, v);
                }
            }
            let h = h.matmul(&h);
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = CubicModel::new(vec![0.0; d], g.clone(), h, 0.1, 1.0).unwrap();
            match solve_cubic(&model, 1e-10) {
                Ok(s) => ok &= norm2(&model.gradient(&s)) <= 1e-8 * (1.0 + norm2(&g)),
                Err(_) => ok = false,
            }
        }
    }
    report("cubic-stationarity", ok);

    // Estimating-function minimizer.
    let mut ok = true;
    {
        use crate::cubic::PsiState;
        let mut st = PsiState::init(vec![0.5, -0.5], 0.8, 0.4);
        let mut a_k = 1.0;
        for i in 0..4 {
            a_k *= 0.6;
            st = st.update(0.4, a_k, 0.8, 0.4, 0.7, &[0.1 * i as f64, -0.2], &[0.3, 0.1]);
        }
        let y = st.argmin().unwrap();
        ok &= st.grad_norm(&y) <= 1e-8;
    }
    report("psi-argmin", ok);

    Ok(all_ok)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
