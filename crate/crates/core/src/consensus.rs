//! Multi-round mixing on stacked node data, consensus-error measurement, and
//! round-count planning from the communication-complexity bounds.

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm2, sub, Matrix};
use crate::network::{ChebyshevOperator, TopologySchedule};
use crate::objectives::{ProblemSuite, ReferenceSolution};
use crate::parallel::map_indexed;

// ---------------------------------------------------------------------------
// Stacked state
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackLabel {
    Point,
    Gradient,
    Hessian,
    GlmWeights,
}

/// Row-major m x p matrix whose rows are the per-node vectors consensus acts
/// on (p = d for points/gradients, d^2 for flattened Hessians, variable for
/// GLM weight stacks).
#[derive(Clone, Debug)]
pub struct Stacked {
    m: usize,
    width: usize,
    label: StackLabel,
    data: Vec<f64>,
}

impl Stacked {
    pub fn from_rows(label: StackLabel, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Layout("stacked state needs at least one row".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Layout("stacked state rows must share a width".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Self { m: rows.len(), width, label, data })
    }

    pub fn from_hessians(mats: &[Matrix]) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::Layout("no hessians".into()));
        }
        let d = mats[0].rows();
        let rows: Vec<Vec<f64>> = mats
            .iter()
            .map(|h| {
                assert_eq!(h.rows(), d);
                h.data().to_vec()
            })
            .collect();
        Self::from_rows(StackLabel::Hessian, &rows)
    }

    /// Rebuild symmetric matrices from flattened Hessian rows. Errors if a row
    /// fails the symmetry invariant.
    pub fn to_hessians(&self) -> Result<Vec<Matrix>> {
        if self.label != StackLabel::Hessian {
            return Err(Error::Layout("stack is not a hessian stack".into()));
        }
        let d = (self.width as f64).sqrt().round() as usize;
        if d * d != self.width {
            return Err(Error::Layout("hessian stack width is not a square".into()));
        }
        let mut out = Vec::with_capacity(self.m);
        for i in 0..self.m {
            let h = Matrix::from_flat(d, d, self.row(i).to_vec())?;
            let scale = h.frobenius_norm().max(1.0);
            if h.max_symmetry_defect() > 1e-10 * scale {
                return Err(Error::Layout(format!(
                    "hessian row {i} lost symmetry (defect {:.3e})",
                    h.max_symmetry_defect()
                )));
            }
            out.push(h);
        }
        Ok(out)
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> StackLabel {
        self.label
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.width];
        for i in 0..self.m {
            axpy(1.0, self.row(i), &mut mean);
        }
        let inv = 1.0 / self.m as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }

    /// (max_i ||u_i - u_bar||, ||U - U_bar||_F)
    pub fn deviation(&self) -> (f64, f64) {
        let mean = self.row_mean();
        let mut max_row = 0.0f64;
        let mut frob_sq = 0.0f64;
        for i in 0..self.m {
            let dev = norm2(&sub(self.row(i), &mean));
            max_row = max_row.max(dev);
            frob_sq += dev * dev;
        }
        (max_row, frob_sq.sqrt())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConsensusReport {
    /// Communication rounds actually consumed (Chebyshev super-rounds count
    /// their full degree).
    pub rounds_used: usize,
    pub max_row_deviation: f64,
    pub frob_deviation: f64,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// One synchronous barrier per round: all output rows are formed from the
/// pre-round state. Rows are mixed concurrently; the result is independent of
/// worker count.
fn mix_once(w: &crate::network::MixingMatrix, u: &Stacked) -> Stacked {
    let m = u.node_count();
    let width = u.width();
    let rows = map_indexed(m, |i| {
        let mut out = vec![0.0; width];
        for j in 0..m {
            let wij = w.get(i, j);
            if wij != 0.0 {
                axpy(wij, u.row(j), &mut out);
            }
        }
        out
    });
    Stacked::from_rows(u.label(), &rows).unwrap()
}

/// Drives the mixing schedule, accounts communication cost, and measures
/// consensus errors. `cursor` is the global step counter into the schedule.
pub struct ConsensusEngine {
    schedule: TopologySchedule,
    chebyshev: Option<ChebyshevOperator>,
    pub cursor: usize,
    pub total_rounds: usize,
    /// Scalars transferred: sum over rounds of (active edges) x (stack width).
    pub total_scalars: f64,
}

impl ConsensusEngine {
    pub fn new(schedule: TopologySchedule) -> Self {
        Self { schedule, chebyshev: None, cursor: 0, total_rounds: 0, total_scalars: 0.0 }
    }

    /// Switch to Chebyshev super-rounds (static schedules only).
    pub fn with_chebyshev(mut self, op: ChebyshevOperator) -> Self {
        self.chebyshev = Some(op);
        self
    }

    pub fn schedule(&self) -> &TopologySchedule {
        &self.schedule
    }

    /// Contraction window used for round planning.
    pub fn effective_tau(&self) -> usize {
        if self.chebyshev.is_some() {
            1
        } else {
            self.schedule.tau()
        }
    }

    /// Contraction factor used for round planning.
    pub fn effective_lambda(&self) -> f64 {
        match &self.chebyshev {
            Some(op) => op.effective_contraction(),
            None => self.schedule.lambda(),
        }
    }

    /// Apply `t` rounds (or `t` Chebyshev super-rounds). Row means are
    /// preserved to machine precision; the report carries the measured
    /// post-consensus deviations.
    pub fn run_fixed(&mut self, u: &Stacked, t: usize) -> (Stacked, ConsensusReport) {
        let mut cur = u.clone();
        let mut rounds = 0usize;
        for _ in 0..t {
            match &self.chebyshev {
                Some(op) => {
                    let w = op.mixing_matrix();
                    let mixed = op.apply(cur.data(), cur.node_count(), cur.width(), |rows| {
                        let tmp =
                            Stacked { m: cur.m, width: cur.width, label: cur.label, data: rows.to_vec() };
                        mix_once(w, &tmp).data
                    });
                    cur = Stacked { m: cur.m, width: cur.width, label: cur.label, data: mixed };
                    let edges = self.schedule.graph_at(self.cursor).edge_count();
                    let k = op.degree();
                    self.total_scalars += (edges * cur.width * k) as f64;
                    self.cursor += k;
                    rounds += k;
                }
                None => {
                    let w = self.schedule.matrix_at(self.cursor);
                    let edges = self.schedule.graph_at(self.cursor).edge_count();
                    cur = mix_once(&w, &cur);
                    self.total_scalars += (edges * cur.width) as f64;
                    self.cursor += 1;
                    rounds += 1;
                }
            }
        }
        self.total_rounds += rounds;
        let (max_row, frob) = cur.deviation();
        (cur, ConsensusReport { rounds_used: rounds, max_row_deviation: max_row, frob_deviation: frob })
    }

    /// Measure the initial deviation and run just enough rounds to push the
    /// Frobenius deviation below `target`.
    pub fn run_adaptive(&mut self, u: &Stacked, target: f64) -> Result<(Stacked, ConsensusReport)> {
        let (_, frob) = u.deviation();
        let t = if frob <= target {
            0
        } else {
            rounds_for(frob, target, self.effective_tau(), self.effective_lambda())?
        };
        Ok(self.run_fixed(u, t))
    }
}

/// Stateless convenience entry point: apply `t` rounds starting at schedule
/// step `start_step`.
pub fn run(
    u: &Stacked,
    schedule: &TopologySchedule,
    start_step: usize,
    t: usize,
) -> (Stacked, ConsensusReport) {
    let mut engine = ConsensusEngine::new(schedule.clone());
    engine.cursor = start_step;
    engine.run_fixed(u, t)
}

// ---------------------------------------------------------------------------
// Round planning
// ---------------------------------------------------------------------------

/// T = max(0, ceil((tau/lambda) ln(radius/target))); 0 whenever the target
/// already covers the radius.
pub fn rounds_for(radius: f64, target: f64, tau: usize, lambda: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&lambda) || lambda == 0.0 {
        return Err(Error::ContractionFailure(format!("lambda {lambda} outside (0, 1]")));
    }
    if target <= 0.0 {
        return Err(Error::Argument("rounds_for: target must be positive".into()));
    }
    if radius <= target {
        return Ok(0);
    }
    Ok(rounds_for_raw(radius, target, tau, lambda).ceil().max(0.0) as usize)
}

/// The un-ceiled (tau/lambda) ln(radius/target); exposed for audits and tests.
pub fn rounds_for_raw(radius: f64, target: f64, tau: usize, lambda: f64) -> f64 {
    (tau as f64 / lambda) * (radius / target).ln()
}

/// Worst-case initial deviations of the three stacks, from the analysis:
/// points start within 2*radius of each other, gradients and Hessians are
/// bounded through the heterogeneity constants at the optimum.
#[derive(Clone, Copy, Debug)]
pub struct StackRadii {
    pub point: f64,
    pub grad: f64,
    pub hess: f64,
}

pub fn worst_case_radii(refsol: &ReferenceSolution, suite: &ProblemSuite, radius: f64) -> StackRadii {
    let m = suite.node_count() as f64;
    let d = suite.dim() as f64;
    StackRadii {
        point: 2.0 * radius * m.sqrt(),
        grad: m.sqrt() * (refsol.zeta_g + 2.0 * suite.l1_max() * radius),
        hess: m.sqrt() * (refsol.zeta_h + 2.0 * suite.l2_max() * d.sqrt() * radius),
    }
}

/// Per-iteration consensus accuracy targets produced by the schedulers.
#[derive(Clone, Copy, Debug)]
pub struct ConsensusTargets {
    pub point: f64,
    pub grad: f64,
    pub hess: f64,
    /// Gradient-at-x target (accelerated method only).
    pub grad_x: Option<f64>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct PlannedRounds {
    pub t_point: usize,
    pub t_grad: usize,
    pub t_hess: usize,
    pub t_grad_x: Option<usize>,
    /// Un-ceiled values for auditing the schedule dump.
    pub raw_point: f64,
    pub raw_grad: f64,
    pub raw_hess: f64,
    pub raw_grad_x: Option<f64>,
}

fn plan(
    radii: &StackRadii,
    targets: &ConsensusTargets,
    tau: usize,
    lambda: f64,
) -> Result<PlannedRounds> {
    let t_point = rounds_for(radii.point, targets.point, tau, lambda)?;
    let t_grad = rounds_for(radii.grad, targets.grad, tau, lambda)?;
    let t_hess = rounds_for(radii.hess, targets.hess, tau, lambda)?;
    let t_grad_x = match targets.grad_x {
        Some(tg) => Some(rounds_for(radii.grad, tg, tau, lambda)?),
        None => None,
    };
    Ok(PlannedRounds {
        t_point,
        t_grad,
        t_hess,
        t_grad_x,
        raw_point: rounds_for_raw(radii.point, targets.point, tau, lambda),
        raw_grad: rounds_for_raw(radii.grad, targets.grad, tau, lambda),
        raw_hess: rounds_for_raw(radii.hess, targets.hess, tau, lambda),
        raw_grad_x: targets.grad_x.map(|tg| rounds_for_raw(radii.grad, tg, tau, lambda)),
    })
}

/// Analytic per-iteration round counts for the convex regime (radii around D).
pub fn plan_rounds_convex(
    refsol: &ReferenceSolution,
    suite: &ProblemSuite,
    targets: &ConsensusTargets,
    tau: usize,
    lambda: f64,
) -> Result<PlannedRounds> {
    plan(&worst_case_radii(refsol, suite, refsol.d), targets, tau, lambda)
}

/// Strongly convex regime: same radii, different targets.
pub fn plan_rounds_sc(
    refsol: &ReferenceSolution,
    suite: &ProblemSuite,
    targets: &ConsensusTargets,
    tau: usize,
    lambda: f64,
) -> Result<PlannedRounds> {
    plan(&worst_case_radii(refsol, suite, refsol.d), targets, tau, lambda)
}

/// Accelerated regime: radii grow with the boundedness radius R-bar and a
/// fourth count covers the gradient consensus at the new iterate.
pub fn plan_rounds_acc(
    refsol: &ReferenceSolution,
    suite: &ProblemSuite,
    targets: &ConsensusTargets,
    tau: usize,
    lambda: f64,
) -> Result<PlannedRounds> {
    if targets.grad_x.is_none() {
        return Err(Error::Argument("accelerated plan needs a grad_x target".into()));
    }
    plan(&worst_case_radii(refsol, suite, refsol.r_bar), targets, tau, lambda)
}

// ---------------------------------------------------------------------------
// Hessian consensus backends
// ---------------------------------------------------------------------------

/// How many rounds a consensus call should use.
#[derive(Clone, Copy, Debug)]
pub enum RoundsRequest {
    Fixed(usize),
    Adaptive { target: f64 },
}

impl ConsensusEngine {
    pub fn run_requested(
        &mut self,
        u: &Stacked,
        req: RoundsRequest,
    ) -> Result<(Stacked, ConsensusReport)> {
        match req {
            RoundsRequest::Fixed(t) => Ok(self.run_fixed(u, t)),
            RoundsRequest::Adaptive { target } => self.run_adaptive(u, target),
        }
    }
}

pub struct HessianAverage {
    /// Per-node approximate averaged Hessians.
    pub hessians: Vec<Matrix>,
    /// Measured against the exact average of the true local Hessians.
    pub report: ConsensusReport,
}

/// Alternative transports for averaging local Hessians (dense stacks vs the
/// GLM weight-vector exchange).
pub trait HessianAverager {
    fn name(&self) -> &'static str;

    /// Evaluate local Hessians at the per-node `points` and run consensus.
    fn average(
        &mut self,
        suite: &ProblemSuite,
        points: &[Vec<f64>],
        engine: &mut ConsensusEngine,
        rounds: RoundsRequest,
    ) -> Result<HessianAverage>;
}

/// Baseline backend: flatten the d x d Hessians into an m x d^2 stack and mix.
pub struct DenseHessianAverager;

impl HessianAverager for DenseHessianAverager {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn average(
        &mut self,
        suite: &ProblemSuite,
        points: &[Vec<f64>],
        engine: &mut ConsensusEngine,
        rounds: RoundsRequest,
    ) -> Result<HessianAverage> {
        let m = suite.node_count();
        let evals = map_indexed(m, |i| suite.objective(i).hessian(&points[i]));
        let mut hessians = Vec::with_capacity(m);
        for e in evals {
            hessians.push(e?);
        }
        let stack = Stacked::from_hessians(&hessians)?;
        let (mixed, report) = engine.run_requested(&stack, rounds)?;
        Ok(HessianAverage { hessians: mixed.to_hessians()?, report })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate, StaticShape, TopologyKind};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn static_sched(shape: StaticShape, m: usize) -> TopologySchedule {
        let mut s = generate(TopologyKind::Static { shape }, m, 0).unwrap();
        let lam = crate::network::estimate_contraction(&s, 1, 1).unwrap();
        s.set_contraction(1, lam);
        s
    }

    #[test]
    fn two_node_average_in_one_round() {
        let sched = static_sched(StaticShape::Complete, 2);
        let u = Stacked::from_rows(StackLabel::Point, &[vec![0.0], vec![2.0]]).unwrap();
        let (out, rep) = run(&u, &sched, 0, 1);
        assert!((out.row(0)[0] - 1.0).abs() < 1e-15);
        assert!((out.row(1)[0] - 1.0).abs() < 1e-15);
        assert_eq!(rep.rounds_used, 1);
        assert!(rep.max_row_deviation < 1e-15);
    }

    #[test]
    fn zero_rounds_is_identity() {
        let sched = static_sched(StaticShape::Ring, 4);
        let u = Stacked::from_rows(
            StackLabel::Point,
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]],
        )
        .unwrap();
        let (out, rep) = run(&u, &sched, 0, 0);
        assert_eq!(out.data(), u.data());
        assert_eq!(rep.rounds_used, 0);
    }

    #[test]
    fn rounds_for_hand_values() {
        // radius 1, target e^-1, tau = 1, lambda = 0.5 -> T = 2.
        assert_eq!(rounds_for(1.0, (-1.0f64).exp(), 1, 0.5).unwrap(), 2);
        // target >= radius -> 0.
        assert_eq!(rounds_for(1.0, 2.0, 1, 0.5).unwrap(), 0);
        // doubling tau doubles T (exactly, before ceiling effects).
        let a = rounds_for_raw(10.0, 0.1, 1, 0.3);
        let b = rounds_for_raw(10.0, 0.1, 2, 0.3);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn ring8_reaches_target_deviation() {
        let sched = static_sched(StaticShape::Ring, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for &target in &[1e-2, 1e-4, 1e-6] {
            for _ in 0..10 {
                let rows: Vec<Vec<f64>> = (0..8)
                    .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let u = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
                let (_, frob) = u.deviation();
                let t = rounds_for(frob, target, sched.tau(), sched.lambda()).unwrap();
                let (_, rep) = run(&u, &sched, 0, t);
                assert!(
                    rep.max_row_deviation <= target,
                    "dev {} > {target}",
                    rep.max_row_deviation
                );
            }
        }
    }

    #[test]
    fn average_preserved_across_rounds() {
        let sched = static_sched(StaticShape::Ring, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let u = Stacked::from_rows(StackLabel::Gradient, &rows).unwrap();
        let before = u.row_mean();
        let (out, _) = run(&u, &sched, 0, 37);
        let after = out.row_mean();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12, "mean drifted: {a} vs {b}");
        }
    }

    #[test]
    fn deviation_monotone_per_window() {
        let mut sched = generate(TopologyKind::TauConnected { tau: 2 }, 6, 3).unwrap();
        let lam = crate::network::estimate_contraction(&sched, 2, 4).unwrap();
        sched.set_contraction(2, 0.9 * lam);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut cur = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
        let mut engine = ConsensusEngine::new(sched);
        let (_, mut frob_prev) = cur.deviation();
        for _window in 0..6 {
            let (next, rep) = engine.run_fixed(&cur, 2);
            assert!(
                rep.frob_deviation <= frob_prev * (1.0 + 1e-12),
                "window deviation grew: {} > {frob_prev}",
                rep.frob_deviation
            );
            frob_prev = rep.frob_deviation;
            cur = next;
        }
    }

    #[test]
    fn hessian_stack_round_trip_preserves_symmetry() {
        let sched = static_sched(StaticShape::Ring, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mats: Vec<Matrix> = (0..4)
            .map(|_| {
                let mut h = Matrix::zeros(3, 3);
                for i in 0..3 {
                    for j in i..3 {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        h.set(i, j, v);
                        h.set(j, i, v);
                    }
                }
                h
            })
            .collect();
        let stack = Stacked::from_hessians(&mats).unwrap();
        let (out, _) = run(&stack, &sched, 0, 9);
        let back = out.to_hessians().unwrap();
        for h in &back {
            assert_eq!(h.max_symmetry_defect(), 0.0, "mixing is exactly symmetric");
        }
    }

    #[test]
    fn chebyshev_super_rounds_preserve_mean_and_contract() {
        let sched = static_sched(StaticShape::Ring, 16);
        let w = sched.static_matrix().unwrap().clone();
        let k = crate::network::chebyshev_degree_for(&w);
        let op = crate::network::chebyshev_operator(&w, k).unwrap();
        let mut engine = ConsensusEngine::new(sched).with_chebyshev(op);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> =
            (0..16).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
        let before_mean = u.row_mean();
        let (before_max, before_frob) = u.deviation();
        let (out, rep) = engine.run_fixed(&u, 1);
        let after_mean = out.row_mean();
        for (a, b) in before_mean.iter().zip(&after_mean) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(rep.frob_deviation <= before_frob, "chebyshev must not expand");
        assert!(rep.max_row_deviation < before_max);
        assert_eq!(rep.rounds_used, k, "super-round counts its full degree");
    }

    #[test]
    fn planner_matches_hand_evaluated_formulas() {
        // Hand-set reference values so the formulas are directly checkable.
        let refsol = ReferenceSolution {
            x_star: vec![0.0; 2],
            f_star: 0.0,
            d: 1.0,
            zeta_g: 0.0,
            zeta_h: 0.0,
            r_bar: 1.0,
        };
        let spec = crate::objectives::SuiteSpec {
            family: crate::objectives::SuiteFamily::Quadratic {
                l1: 1.0,
                mu: 1.0,
                singular_fraction: 0.0,
                b_scale: 1.0,
            },
            nodes: 4,
            dim: 2,
            heterogeneity: 0.0,
        };
        let suite = crate::objectives::make_suite(&spec, 0).unwrap();
        let eps = 1.0;
        let d = refsol.d;
        // Convex targets at (L + L2bar) = 1, D = 1 (identical nodes: zeta = 0).
        let targets = ConsensusTargets {
            point: (2.0f64.sqrt() * eps / (288.0 * suite.l1_bar() * d))
                .min(eps.sqrt() / (3.0 * d.sqrt())),
            grad: 2.0f64.sqrt() / 144.0 * eps / d,
            hess: 3.0f64.sqrt() / 72.0 * (eps / d).sqrt(),
            grad_x: None,
        };
        let tau = 1;
        let lambda = 0.25;
        let plan = plan_rounds_convex(&refsol, &suite, &targets, tau, lambda).unwrap();
        // Identical nodes: Tg log argument reduces to
        // 144 D sqrt(m) (2 L1max D) / (sqrt(2) eps).
        let m = 4.0f64;
        let expect_grad_arg = 144.0 * d * m.sqrt() * (2.0 * suite.l1_max() * d)
            / (2.0f64.sqrt() * eps);
        assert!(
            (plan.raw_grad - (tau as f64 / lambda) * expect_grad_arg.ln()).abs() < 1e-9,
            "grad plan {} vs hand {}",
            plan.raw_grad,
            (tau as f64 / lambda) * expect_grad_arg.ln()
        );
        // Halving eps adds (tau/lambda) ln 2 to the gradient count.
        let targets_half = ConsensusTargets { grad: targets.grad / 2.0, ..targets };
        let plan_half = plan_rounds_convex(&refsol, &suite, &targets_half, tau, lambda).unwrap();
        let grow = plan_half.raw_grad - plan.raw_grad;
        assert!((grow - (tau as f64 / lambda) * 2.0f64.ln()).abs() < 1e-9);
        // Complete-graph lambda = 1, tau = 1: bare logarithm ceiling.
        let plan_complete = plan_rounds_convex(&refsol, &suite, &targets, 1, 1.0).unwrap();
        let radii = worst_case_radii(&refsol, &suite, refsol.d);
        assert_eq!(
            plan_complete.t_grad,
            (radii.grad / targets.grad).ln().ceil() as usize
        );
    }

    #[test]
    fn sc_hessian_rounds_independent_of_eps() {
        let refsol = ReferenceSolution {
            x_star: vec![0.0; 2],
            f_star: 0.0,
            d: 2.0,
            zeta_g: 0.5,
            zeta_h: 0.25,
            r_bar: 2.0,
        };
        let spec = crate::objectives::SuiteSpec {
            family: crate::objectives::SuiteFamily::Quadratic {
                l1: 3.0,
                mu: 1.0,
                singular_fraction: 0.0,
                b_scale: 1.0,
            },
            nodes: 3,
            dim: 2,
            heterogeneity: 0.0,
        };
        let suite = crate::objectives::make_suite(&spec, 0).unwrap();
        let mu_bar = suite.mu_bar();
        // TH has target mu_bar / 16 regardless of eps.
        let t1 = ConsensusTargets { point: 0.1, grad: 0.1, hess: mu_bar / 16.0, grad_x: None };
        let t2 = ConsensusTargets { point: 0.01, grad: 0.01, hess: mu_bar / 16.0, grad_x: None };
        let p1 = plan_rounds_sc(&refsol, &suite, &t1, 1, 0.5).unwrap();
        let p2 = plan_rounds_sc(&refsol, &suite, &t2, 1, 0.5).unwrap();
        assert_eq!(p1.t_hess, p2.t_hess);
        // Doubling mu_bar drops the raw TH by (tau/lambda) ln 2.
        let t3 = ConsensusTargets { hess: 2.0 * mu_bar / 16.0, ..t1 };
        let p3 = plan_rounds_sc(&refsol, &suite, &t3, 1, 0.5).unwrap();
        assert!((p1.raw_hess - p3.raw_hess - (1.0 / 0.5) * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn acc_planner_grad_x_formula() {
        // T^{g|x} = (tau/lambda) log(8 R_bar sqrt(m) (zeta_g + 2 L1max R_bar) / eps).
        let refsol = ReferenceSolution {
            x_star: vec![0.0; 2],
            f_star: 0.0,
            d: 1.5,
            zeta_g: 0.3,
            zeta_h: 0.1,
            r_bar: 2.5,
        };
        let spec = crate::objectives::SuiteSpec {
            family: crate::objectives::SuiteFamily::Quadratic {
                l1: 2.0,
                mu: 0.5,
                singular_fraction: 0.0,
                b_scale: 1.0,
            },
            nodes: 5,
            dim: 2,
            heterogeneity: 0.0,
        };
        let suite = crate::objectives::make_suite(&spec, 0).unwrap();
        let eps = 1e-3;
        let targets = ConsensusTargets {
            point: 0.1,
            grad: 0.05,
            hess: 0.02,
            grad_x: Some(eps / (8.0 * refsol.r_bar)),
        };
        let (tau, lambda) = (2usize, 0.4);
        let plan = plan_rounds_acc(&refsol, &suite, &targets, tau, lambda).unwrap();
        let m = 5.0f64;
        let hand = (tau as f64 / lambda)
            * (8.0 * refsol.r_bar * m.sqrt() * (refsol.zeta_g + 2.0 * suite.l1_max() * refsol.r_bar)
                / eps)
                .ln();
        assert!((plan.raw_grad_x.unwrap() - hand).abs() < 1e-9);
        assert_eq!(plan.t_grad_x.unwrap(), hand.ceil() as usize);
        // Halving eps adds (tau/lambda) ln 2 before the ceiling.
        let targets2 =
            ConsensusTargets { grad_x: Some(eps / 2.0 / (8.0 * refsol.r_bar)), ..targets };
        let plan2 = plan_rounds_acc(&refsol, &suite, &targets2, tau, lambda).unwrap();
        let grow = plan2.raw_grad_x.unwrap() - plan.raw_grad_x.unwrap();
        assert!((grow - (tau as f64 / lambda) * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn disconnected_window_is_contraction_failure() {
        // A tau = 2 matching schedule examined over single-step windows never
        // mixes, so the estimate fails.
        let sched = generate(TopologyKind::TauConnected { tau: 2 }, 6, 0).unwrap();
        let r = crate::network::estimate_contraction(&sched, 1, 3);
        assert!(matches!(r, Err(crate::error::Error::ContractionFailure(_))));
    }

    #[test]
    fn adaptive_run_meets_target() {
        let sched = static_sched(StaticShape::Ring, 8);
        let mut engine = ConsensusEngine::new(sched);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> =
                (0..8).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let u = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
            let target = 1e-5;
            let (_, rep) = engine.run_adaptive(&u, target).unwrap();
            assert!(rep.max_row_deviation <= target);
        }
    }

    #[test]
    fn cost_accounting_counts_edges_times_width() {
        let sched = static_sched(StaticShape::Ring, 6); // 6 edges
        let mut engine = ConsensusEngine::new(sched);
        let u = Stacked::from_rows(
            StackLabel::Point,
            &(0..6).map(|i| vec![i as f64; 5]).collect::<Vec<_>>(),
        )
        .unwrap();
        engine.run_fixed(&u, 3);
        assert_eq!(engine.total_rounds, 3);
        assert_eq!(engine.total_scalars, (3 * 6 * 5) as f64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        /// Row means are invariant under any number of mixing rounds.
        #[test]
        fn prop_average_preservation(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            t in 0usize..12,
        ) {
            let rows: Vec<Vec<f64>> = vals.chunks(2).map(|c| c.to_vec()).collect();
            let sched = static_sched(StaticShape::Ring, 6);
            let u = Stacked::from_rows(StackLabel::Point, &rows).unwrap();
            let before = u.row_mean();
            let (out, rep) = run(&u, &sched, 0, t);
            let after = out.row_mean();
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(rep.max_row_deviation <= rep.frob_deviation + 1e-15);
        }
    }
}
