//! Decentralized cubic Newton driver: per-iteration consensus on points,
//! local derivative evaluation, consensus on derivatives, local cubic step;
//! plus the convex / strongly convex parameter schedulers.

use crate::consensus::{
    ConsensusEngine, ConsensusTargets, HessianAverager, PlannedRounds, RoundsRequest, Stacked,
    StackLabel,
};
use crate::cubic::{solve_cubic, CubicModel};
use crate::error::{Error, Result};
use crate::harness::{IterationRow, MetricsTrace};
use crate::linalg::{axpy, norm2, sub};
use crate::objectives::{ProblemSuite, ReferenceSolution};
use crate::parallel::map_indexed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Convex,
    StronglyConvex,
}

/// Resolved parameters of one basic-method run.
#[derive(Clone, Debug)]
pub struct DcnParams {
    pub regime: Regime,
    pub eps: f64,
    /// Total iteration count N; the run performs N + 1 steps.
    pub n_iters: usize,
    pub gamma: f64,
    /// Analytic regularization levels (adaptive mode re-derives them from
    /// measured consensus errors each iteration).
    pub delta1: f64,
    pub delta2: f64,
    pub l_reg: f64,
    /// Strongly convex contraction factor.
    pub alpha: Option<f64>,
    pub targets: ConsensusTargets,
    /// Set when the reference solution already meets the accuracy goal.
    pub already_solved: bool,
}

/// Minimum over only the finite, well-defined candidates.
fn guarded_min(cands: &[f64]) -> f64 {
    cands
        .iter()
        .copied()
        .filter(|v| v.is_finite() && *v > 0.0)
        .fold(f64::INFINITY, f64::min)
}

/// Convex-regime schedule: iteration count, smoothing, regularization levels,
/// and consensus accuracy targets as functions of (eps, D, L + L2bar).
pub fn schedule_convex(
    refsol: &ReferenceSolution,
    suite: &ProblemSuite,
    eps: f64,
    l_reg: f64,
) -> Result<DcnParams> {
    if eps <= 0.0 {
        return Err(Error::Argument("eps must be positive".into()));
    }
    if l_reg < suite.l2_bar() {
        return Err(Error::Config(format!(
            "cubic coefficient {l_reg} below L2bar {}",
            suite.l2_bar()
        )));
    }
    let d = refsol.d;
    if d == 0.0 {
        return Ok(DcnParams {
            regime: Regime::Convex,
            eps,
            n_iters: 0,
            gamma: 1.0,
            delta1: 0.0,
            delta2: 0.0,
            l_reg,
            alpha: None,
            targets: ConsensusTargets { point: eps, grad: eps, hess: eps, grad_x: None },
            already_solved: true,
        });
    }
    let lt = l_reg + suite.l2_bar();
    if lt <= 0.0 {
        return Err(Error::Config(
            "convex schedule needs L + L2bar > 0; choose a positive cubic coefficient".into(),
        ));
    }
    let l1b = suite.l1_bar();
    let l2b = suite.l2_bar();

    let grad_target = 2.0f64.sqrt() / 144.0 * eps / d;
    let hess_target = 3.0f64.sqrt() / 72.0 * (eps * lt / d).sqrt();

    let small_eps = eps <= 12.0 * lt * d.powi(3);
    let (n_iters, point_target) = if small_eps {
        let n = ((108.0 * lt * d.powi(3) / eps).sqrt().ceil() as usize).saturating_sub(2);
        let pt = guarded_min(&[
            2.0f64.sqrt() * eps / (288.0 * l1b * d),
            (3.0 * eps * lt).sqrt() / (144.0 * l2b * d.sqrt()),
            eps.sqrt() / (3.0 * (lt * d).sqrt()),
        ]);
        (n, pt)
    } else {
        let pt = guarded_min(&[
            2.0f64.sqrt() * eps / (288.0 * l1b * d),
            (3.0 * eps * lt).sqrt() / (144.0 * l2b * d.sqrt()),
            eps.powf(1.0 / 3.0) / (6.0 * lt).powf(1.0 / 3.0),
            d,
        ]);
        (1, pt)
    };
    let n_f = n_iters as f64;
    let gamma = ((n_f + 1.0) * (n_f + 2.0)).sqrt() / (6.0 * d);
    let delta1 = 2.0f64.sqrt() / 72.0 * eps / d;
    let delta2 = 3.0f64.sqrt() / 36.0 * (eps * lt / d).sqrt();
    Ok(DcnParams {
        regime: Regime::Convex,
        eps,
        n_iters,
        gamma,
        delta1,
        delta2,
        l_reg,
        alpha: None,
        targets: ConsensusTargets {
            point: point_target,
            grad: grad_target,
            hess: hess_target,
            grad_x: None,
        },
        already_solved: false,
    })
}

/// Strongly convex schedule: gamma = 1/D, linear rate alpha, and the
/// corresponding accuracy targets.
pub fn schedule_strongly_convex(
    refsol: &ReferenceSolution,
    suite: &ProblemSuite,
    eps: f64,
    l_reg: f64,
    x0: &[f64],
) -> Result<DcnParams> {
    if eps <= 0.0 {
        return Err(Error::Argument("eps must be positive".into()));
    }
    if suite.mu_bar() <= 0.0 {
        return Err(Error::Config("strongly convex schedule needs mu_bar > 0".into()));
    }
    if l_reg < suite.l2_bar() {
        return Err(Error::Config(format!(
            "cubic coefficient {l_reg} below L2bar {}",
            suite.l2_bar()
        )));
    }
    let d = refsol.d;
    let mu = suite.mu_bar();
    let lt = l_reg + suite.l2_bar();
    let l1b = suite.l1_bar();
    let l2b = suite.l2_bar();
    if d == 0.0 {
        return Ok(DcnParams {
            regime: Regime::StronglyConvex,
            eps,
            n_iters: 0,
            gamma: 1.0,
            delta1: 0.0,
            delta2: 0.0,
            l_reg,
            alpha: Some(0.5),
            targets: ConsensusTargets { point: eps, grad: eps, hess: eps, grad_x: None },
            already_solved: true,
        });
    }

    let alpha = guarded_min(&[0.5, (3.0 * mu / (16.0 * lt * d)).sqrt()]);
    let point_target = guarded_min(&[
        alpha * eps / (24.0 * l1b * d),
        (alpha * eps / (4.0 * lt)).powf(1.0 / 3.0),
        2.0 * d
            * (alpha * eps * l1b
                / (3.0 * mu * d * d * l1b + 4.0 * alpha * eps * (2.0 * l1b + d * l2b)))
                .sqrt(),
        mu / (64.0 * (l1b / d + l2b)),
    ]);
    let grad_target = guarded_min(&[alpha * eps / (12.0 * d), mu * d / 32.0]);
    let hess_target = mu / 16.0;
    let delta1 = grad_target + 2.0 * l1b * point_target;
    let delta2 = hess_target + 2.0 * l2b * point_target;

    let gap0 = suite.value(x0)? - refsol.f_star;
    let n_iters = if gap0 <= eps / 2.0 {
        0
    } else {
        ((1.0 / alpha) * (2.0 * gap0 / eps).ln()).ceil() as usize - 1
    };
    Ok(DcnParams {
        regime: Regime::StronglyConvex,
        eps,
        n_iters,
        gamma: 1.0 / d,
        delta1,
        delta2,
        l_reg,
        alpha: Some(alpha),
        targets: ConsensusTargets {
            point: point_target,
            grad: grad_target,
            hess: hess_target,
            grad_x: None,
        },
        already_solved: false,
    })
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Round selection per consensus call.
#[derive(Clone, Debug)]
pub enum PlanningMode {
    /// Fixed counts from the communication-complexity formulas.
    Analytic(PlannedRounds),
    /// Measure the initial deviation each call and run just enough rounds.
    Adaptive,
}

impl PlanningMode {
    pub(crate) fn point_request(&self, targets: &ConsensusTargets) -> RoundsRequest {
        match self {
            PlanningMode::Analytic(p) => RoundsRequest::Fixed(p.t_point),
            PlanningMode::Adaptive => RoundsRequest::Adaptive { target: targets.point },
        }
    }

    pub(crate) fn grad_request(&self, targets: &ConsensusTargets) -> RoundsRequest {
        match self {
            PlanningMode::Analytic(p) => RoundsRequest::Fixed(p.t_grad),
            PlanningMode::Adaptive => RoundsRequest::Adaptive { target: targets.grad },
        }
    }

    pub(crate) fn hess_request(&self, targets: &ConsensusTargets) -> RoundsRequest {
        match self {
            PlanningMode::Analytic(p) => RoundsRequest::Fixed(p.t_hess),
            PlanningMode::Adaptive => RoundsRequest::Adaptive { target: targets.hess },
        }
    }

    pub(crate) fn grad_x_request(&self, targets: &ConsensusTargets) -> RoundsRequest {
        match self {
            PlanningMode::Analytic(p) => RoundsRequest::Fixed(p.t_grad_x.unwrap_or(0)),
            PlanningMode::Adaptive => {
                RoundsRequest::Adaptive { target: targets.grad_x.unwrap_or(f64::INFINITY) }
            }
        }
    }
}

/// Whether delta1/delta2 come from the schedule or from measured errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaMode {
    Analytic,
    Adaptive,
}

pub struct DcnDriver<'a> {
    pub suite: &'a ProblemSuite,
    pub refsol: &'a ReferenceSolution,
    pub params: DcnParams,
    pub engine: ConsensusEngine,
    pub backend: Box<dyn HessianAverager + 'a>,
    pub planning: PlanningMode,
    pub delta_mode: DeltaMode,
    pub solver_tol: f64,
}

/// Mutable per-run state: the m x d point ensemble and the iteration index.
pub struct DcnState {
    pub points: Vec<Vec<f64>>,
    pub k: usize,
}

impl DcnState {
    pub fn common_start(m: usize, x0: &[f64]) -> Self {
        Self { points: vec![x0.to_vec(); m], k: 0 }
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.points[0].len();
        let mut mean = vec![0.0; d];
        for p in &self.points {
            axpy(1.0, p, &mut mean);
        }
        let inv = 1.0 / self.points.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }
}

impl<'a> DcnDriver<'a> {
    /// One iteration of the basic method. Returns the completed metrics row
    /// for the new iterate.
    pub fn step(&mut self, state: &mut DcnState) -> Result<IterationRow> {
        let m = self.suite.node_count();
        let targets = self.params.targets;

        // Consensus on parameters.
        let x_stack = Stacked::from_rows(StackLabel::Point, &state.points)?;
        let (x_hat, rep_x) = self
            .engine
            .run_requested(&x_stack, self.planning.point_request(&targets))
            .map_err(|e| ctx(e, state.k, "point consensus"))?;
        let points_hat = x_hat.rows();

        // Local derivatives, then consensus on them.
        let grads = collect(map_indexed(m, |i| self.suite.objective(i).gradient(&points_hat[i])))?;
        let g_stack = Stacked::from_rows(StackLabel::Gradient, &grads)?;
        let (g_hat, rep_g) = self
            .engine
            .run_requested(&g_stack, self.planning.grad_request(&targets))
            .map_err(|e| ctx(e, state.k, "gradient consensus"))?;

        let hess_avg = self
            .backend
            .average(
                self.suite,
                &points_hat,
                &mut self.engine,
                self.planning.hess_request(&targets),
            )
            .map_err(|e| ctx(e, state.k, "hessian consensus"))?;

        // Regularization levels for this iteration.
        let (delta1, delta2) = match self.delta_mode {
            DeltaMode::Analytic => (self.params.delta1, self.params.delta2),
            DeltaMode::Adaptive => (
                rep_g.max_row_deviation + 2.0 * self.suite.l1_bar() * rep_x.max_row_deviation,
                hess_avg.report.max_row_deviation
                    + 2.0 * self.suite.l2_bar() * rep_x.max_row_deviation,
            ),
        };
        let sigma2 = self.params.gamma * delta1 + delta2;

        // Local cubic steps.
        let l_reg = self.params.l_reg;
        let tol = self.solver_tol;
        let hessians = &hess_avg.hessians;
        let steps = collect(map_indexed(m, |i| {
            let model = CubicModel::new(
                points_hat[i].clone(),
                g_hat.row(i).to_vec(),
                hessians[i].clone(),
                sigma2,
                l_reg,
            )?;
            solve_cubic(&model, tol)
        }))
        .map_err(|e| ctx(e, state.k, "cubic step"))?;
        for i in 0..m {
            let mut next = points_hat[i].clone();
            axpy(1.0, &steps[i], &mut next);
            state.points[i] = next;
        }
        state.k += 1;

        // Metrics.
        let mean = state.mean();
        let f_gap = self.suite.value(&mean)? - self.refsol.f_star;
        let mut f_nodes = 0.0;
        let mut max_radius_x = 0.0f64;
        for p in &state.points {
            f_nodes += self.suite.value(p)?;
            max_radius_x = max_radius_x.max(norm2(&sub(p, &self.refsol.x_star)));
        }
        let f_gap_nodes_mean = f_nodes / m as f64 - self.refsol.f_star;
        Ok(IterationRow {
            iter: state.k,
            f_gap,
            f_gap_nodes_mean,
            delta_point: rep_x.max_row_deviation,
            delta_grad: rep_g.max_row_deviation,
            delta_hess: hess_avg.report.max_row_deviation,
            delta_grad_x: 0.0,
            delta1_used: delta1,
            delta2_used: delta2,
            rounds_point: rep_x.rounds_used,
            rounds_grad: rep_g.rounds_used,
            rounds_hess: hess_avg.report.rounds_used,
            rounds_grad_x: 0,
            cum_rounds: self.engine.total_rounds,
            cum_scalars: self.engine.total_scalars,
            max_radius_x,
            max_radius_y: 0.0,
            max_radius_v: 0.0,
            r_bar_ok: true,
            wall_time_s: 0.0,
        })
    }

    /// Run N + 1 iterations from the common start, recording the full trace.
    pub fn run(&mut self, x0: &[f64]) -> Result<MetricsTrace> {
        let m = self.suite.node_count();
        let mut state = DcnState::common_start(m, x0);
        let mut trace = MetricsTrace::new(self.params.eps);
        let gap0 = self.suite.value(x0)? - self.refsol.f_star;
        trace.push_initial(gap0, norm2(&sub(x0, &self.refsol.x_star)));
        if self.params.already_solved {
            return Ok(trace);
        }
        let started = std::time::Instant::now();
        for _ in 0..=self.params.n_iters {
            let mut row = self.step(&mut state)?;
            row.wall_time_s = started.elapsed().as_secs_f64();
            trace.push(row);
        }
        Ok(trace)
    }
}

fn ctx(e: Error, k: usize, what: &str) -> Error {
    match e {
        Error::Convergence { msg, residual } => Error::Convergence {
            msg: format!("iteration {k}, {what}: {msg}"),
            residual,
        },
        other => other,
    }
}

pub(crate) fn collect<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::DenseHessianAverager;
    use crate::network::{estimate_contraction, generate, StaticShape, TopologyKind};
    use crate::objectives::{make_suite, reference_solve, LocalObjective, SuiteFamily, SuiteSpec};
    use crate::linalg::Matrix;

    fn quad_suite(m: usize, d: usize, l1: f64, mu: f64, het: f64, seed: u64) -> ProblemSuite {
        let spec = SuiteSpec {
            family: SuiteFamily::Quadratic { l1, mu, singular_fraction: 0.0, b_scale: 1.0 },
            nodes: m,
            dim: d,
            heterogeneity: het,
        };
        make_suite(&spec, seed).unwrap()
    }

    fn exact_engine(m: usize) -> ConsensusEngine {
        let mut sched =
            generate(TopologyKind::Static { shape: StaticShape::Complete }, m, 0).unwrap();
        let lam = estimate_contraction(&sched, 1, 1).unwrap();
        sched.set_contraction(1, lam);
        ConsensusEngine::new(sched)
    }

    #[test]
    fn convex_schedule_large_eps_branch() {
        // L + L2bar = 1, D = 1, eps = 108 > 12: one iteration.
        let refsol = ReferenceSolution {
            x_star: vec![0.0],
            f_star: 0.0,
            d: 1.0,
            zeta_g: 0.0,
            zeta_h: 0.0,
            r_bar: 1.0,
        };
        let suite = quad_suite(2, 1, 1.0, 0.5, 0.0, 1);
        let p = schedule_convex(&refsol, &suite, 108.0, 1.0).unwrap();
        assert_eq!(p.n_iters, 1);
    }

    #[test]
    fn convex_schedule_small_eps_iteration_count() {
        // L + L2bar = 1, D = 1, eps = 108/10000: N = 100 - 2 = 98.
        let refsol = ReferenceSolution {
            x_star: vec![0.0],
            f_star: 0.0,
            d: 1.0,
            zeta_g: 0.0,
            zeta_h: 0.0,
            r_bar: 1.0,
        };
        let suite = quad_suite(2, 1, 1.0, 0.5, 0.0, 1);
        let p = schedule_convex(&refsol, &suite, 108.0 / 10000.0, 1.0).unwrap();
        assert_eq!(p.n_iters, 98);
        // gamma = sqrt((N+1)(N+2)) / (6 D)
        assert!((p.gamma - (99.0f64 * 100.0).sqrt() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn convex_gradient_target_value() {
        // Delta_g target = sqrt(2)/144 * eps / D ~ 0.009821 at eps = D = 1.
        let refsol = ReferenceSolution {
            x_star: vec![0.0],
            f_star: 0.0,
            d: 1.0,
            zeta_g: 0.0,
            zeta_h: 0.0,
            r_bar: 1.0,
        };
        let suite = quad_suite(2, 1, 1.0, 0.5, 0.0, 1);
        let p = schedule_convex(&refsol, &suite, 1.0, 1.0).unwrap();
        assert!((p.targets.grad - 0.009820927516479827).abs() < 1e-12);
        // Proof choice: delta1 = sqrt(2)/72 eps / D = 2x the gradient target here.
        assert!((p.delta1 - 2.0 * p.targets.grad).abs() < 1e-15);
    }

    #[test]
    fn sc_schedule_alpha_values() {
        let refsol = ReferenceSolution {
            x_star: vec![0.0],
            f_star: 0.0,
            d: 1.0,
            zeta_g: 0.0,
            zeta_h: 0.0,
            r_bar: 1.0,
        };
        // mu_bar = 1, L + L2bar = 3, D = 1: alpha = sqrt(3/48) = 0.25.
        let suite = quad_suite(2, 1, 1.0, 1.0, 0.0, 1);
        let p = schedule_strongly_convex(&refsol, &suite, 1e-3, 3.0, &[5.0]).unwrap();
        assert!((p.alpha.unwrap() - 0.25).abs() < 1e-12);
        // Hessian target is mu_bar / 16.
        assert!((p.targets.hess - 1.0 / 16.0).abs() < 1e-15);
        // Saturation: 3 mu / (16 (L + L2bar) D) >= 1/4 -> alpha = 1/2.
        let p2 = schedule_strongly_convex(&refsol, &suite, 1e-3, 0.0, &[5.0]).unwrap();
        assert_eq!(p2.alpha.unwrap(), 0.5);
    }

    #[test]
    fn single_node_step_is_centralized_cubic_newton() {
        // m = 1: consensus is the identity, so one step equals a centralized
        // cubic Newton step with sigma2 = gamma delta1 + delta2.
        let obj =
            LocalObjective::quadratic(Matrix::identity(2).scaled(2.0), vec![1.0, -1.0]).unwrap();
        let suite = ProblemSuite::new(vec![obj.clone()]).unwrap();
        let refsol = reference_solve(&suite, 1e-12, &[0.0, 0.0]).unwrap();
        let params = DcnParams {
            regime: Regime::StronglyConvex,
            eps: 1e-8,
            n_iters: 0,
            gamma: 0.5,
            delta1: 0.2,
            delta2: 0.1,
            l_reg: 1.0,
            alpha: Some(0.5),
            targets: ConsensusTargets { point: 1.0, grad: 1.0, hess: 1.0, grad_x: None },
            already_solved: false,
        };
        let mut driver = DcnDriver {
            suite: &suite,
            refsol: &refsol,
            params,
            engine: exact_engine(1),
            backend: Box::new(DenseHessianAverager),
            planning: PlanningMode::Adaptive,
            delta_mode: DeltaMode::Analytic,
            solver_tol: 1e-12,
        };
        let x0 = vec![1.0, 2.0];
        let mut state = DcnState::common_start(1, &x0);
        driver.step(&mut state).unwrap();
        // Centralized reference: one cubic step on the same model.
        let g = obj.gradient(&x0).unwrap();
        let h = obj.hessian(&x0).unwrap();
        let sigma2 = 0.5 * 0.2 + 0.1;
        let model = CubicModel::new(x0.clone(), g, h, sigma2, 1.0).unwrap();
        let s = solve_cubic(&model, 1e-12).unwrap();
        for j in 0..2 {
            assert!((state.points[0][j] - (x0[j] + s[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_counterexample_stays_at_optimum() {
        // f1 = (x+1)^2, f2 = (2x-1)^2 started at x* = 1/5 with exact
        // averaging: the naive local-Newton-then-average scheme jumps to -1/4,
        // this method must stay put.
        let f1 = LocalObjective::quadratic(Matrix::from_flat(1, 1, vec![2.0]).unwrap(), vec![2.0])
            .unwrap();
        let f2 = LocalObjective::quadratic(Matrix::from_flat(1, 1, vec![8.0]).unwrap(), vec![-4.0])
            .unwrap();
        let suite = ProblemSuite::new(vec![f1.clone(), f2.clone()]).unwrap();
        let refsol = reference_solve(&suite, 1e-12, &[0.2]).unwrap();
        // Naive scheme: local Newton steps then averaging.
        let x0 = 0.2;
        let naive = |obj: &LocalObjective| {
            let g = obj.gradient(&[x0]).unwrap()[0];
            let h = obj.hessian(&[x0]).unwrap().get(0, 0);
            x0 - g / h
        };
        let naive_next = 0.5 * (naive(&f1) + naive(&f2));
        assert!((naive_next + 0.25).abs() < 1e-12, "naive scheme lands at -1/4");

        let params = DcnParams {
            regime: Regime::StronglyConvex,
            eps: 1e-10,
            n_iters: 3,
            gamma: 1.0,
            delta1: 0.0,
            delta2: 0.0,
            l_reg: 0.0,
            alpha: Some(0.5),
            targets: ConsensusTargets { point: 1e-14, grad: 1e-14, hess: 1e-14, grad_x: None },
            already_solved: false,
        };
        let mut driver = DcnDriver {
            suite: &suite,
            refsol: &refsol,
            params,
            engine: exact_engine(2),
            backend: Box::new(DenseHessianAverager),
            planning: PlanningMode::Adaptive,
            delta_mode: DeltaMode::Analytic,
            solver_tol: 1e-12,
        };
        let trace = driver.run(&[0.2]).unwrap();
        for row in &trace.rows {
            assert!(row.f_gap.abs() < 1e-12, "gap grew: {}", row.f_gap);
        }
    }

    #[test]
    fn descent_and_jensen_invariants_on_ring() {
        let suite = quad_suite(5, 4, 10.0, 0.5, 0.8, 3);
        let x0 = vec![2.0; 4];
        let refsol = reference_solve(&suite, 1e-11, &x0).unwrap();
        let mut sched = generate(TopologyKind::Static { shape: StaticShape::Ring }, 5, 0).unwrap();
        let lam = estimate_contraction(&sched, 1, 1).unwrap();
        sched.set_contraction(1, lam);
        let params = schedule_strongly_convex(&refsol, &suite, 1e-4, 0.1, &x0).unwrap();
        let lt = 0.1 + suite.l2_bar();
        let mut driver = DcnDriver {
            suite: &suite,
            refsol: &refsol,
            params: params.clone(),
            engine: ConsensusEngine::new(sched),
            backend: Box::new(DenseHessianAverager),
            planning: PlanningMode::Adaptive,
            delta_mode: DeltaMode::Adaptive,
            solver_tol: 1e-11,
        };
        let trace = driver.run(&x0).unwrap();
        let alpha = params.alpha.unwrap();
        for w in trace.rows.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            // Jensen: f(mean) <= mean of f over nodes.
            assert!(cur.f_gap <= cur.f_gap_nodes_mean + 1e-10);
            // Descent up to the consensus error terms.
            let err_k = 2.0 * lt / 3.0 * cur.delta_point.powi(3)
                + 2.0 * (params.gamma * cur.delta1_used + cur.delta2_used)
                    * cur.delta_point.powi(2);
            let slack = cur.delta1_used / params.gamma + err_k;
            assert!(
                cur.f_gap <= prev.f_gap + slack + 1e-10,
                "descent violated: {} > {} + {slack}",
                cur.f_gap,
                prev.f_gap
            );
            // Strongly convex one-step recursion.
            assert!(
                cur.f_gap <= (1.0 - alpha) * prev.f_gap + slack + 1e-10,
                "sc recursion violated at iter {}",
                cur.iter
            );
        }
        // The run ends at the target.
        assert!(trace.rows.last().unwrap().f_gap <= 1e-4);
    }

    #[test]
    fn inexact_taylor_bound_holds_at_probes() {
        use rand::{RngExt, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        // One hand-driven iteration on a ring; check the inexact-Taylor bound
        // |f(x) - phi_hat(x)| at random probes with measured Delta1, Delta2.
        let suite = quad_suite(4, 3, 4.0, 0.5, 1.0, 6);
        let x0 = vec![1.5; 3];
        let _ = reference_solve(&suite, 1e-11, &x0).unwrap();
        let mut sched = generate(TopologyKind::Static { shape: StaticShape::Ring }, 4, 0).unwrap();
        let lam = estimate_contraction(&sched, 1, 1).unwrap();
        sched.set_contraction(1, lam);
        let mut engine = ConsensusEngine::new(sched);

        // Scatter the nodes a little so consensus is inexact.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<Vec<f64>> = (0..4)
            .map(|_| x0.iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x_stack = Stacked::from_rows(StackLabel::Point, &points).unwrap();
        let (x_hat, rep_x) = engine.run_fixed(&x_stack, 2);
        let points_hat = x_hat.rows();
        let grads: Vec<Vec<f64>> =
            (0..4).map(|i| suite.objective(i).gradient(&points_hat[i]).unwrap()).collect();
        let g_stack = Stacked::from_rows(StackLabel::Gradient, &grads).unwrap();
        let (g_hat, rep_g) = engine.run_fixed(&g_stack, 2);
        let mut backend = DenseHessianAverager;
        let avg = backend
            .average(&suite, &points_hat, &mut engine, RoundsRequest::Fixed(2))
            .unwrap();

        let delta1 = rep_g.max_row_deviation + 2.0 * suite.l1_bar() * rep_x.max_row_deviation;
        let delta2 =
            avg.report.max_row_deviation + 2.0 * suite.l2_bar() * rep_x.max_row_deviation;
        for i in 0..4 {
            for _ in 0..10 {
                let probe: Vec<f64> = points_hat[i]
                    .iter()
                    .map(|v| v + rng.random_range(-1.0..1.0))
                    .collect();
                let r = norm2(&sub(&probe, &points_hat[i]));
                let f_probe = suite.value(&probe).unwrap();
                // phi_hat(x) = f(x_hat_i) + <g_hat, x - x_hat> + 0.5 <H_hat (x-x_hat), x - x_hat>
                let dx = sub(&probe, &points_hat[i]);
                let phi = suite.value(&points_hat[i]).unwrap()
                    + crate::linalg::dot(g_hat.row(i), &dx)
                    + 0.5 * crate::linalg::dot(&avg.hessians[i].matvec(&dx), &dx);
                let bound = delta1 * r + 0.5 * delta2 * r * r
                    + suite.l2_bar() / 6.0 * r.powi(3);
                assert!(
                    (f_probe - phi).abs() <= bound + 1e-9,
                    "taylor bound violated: {} > {bound}",
                    (f_probe - phi).abs()
                );
            }
        }
    }
}
