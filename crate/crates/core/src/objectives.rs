//! Local objective families, their derivative oracles, problem-wide constants,
//! and the centralized reference solver that supplies ground truth
//! (`x*`, `f*`, distance bounds, heterogeneity constants) to the schedulers.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cubic::{solve_cubic, CubicModel};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm2, sub, sym_eigen, Matrix};

/// How much of the derivative stack `eval` should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivOrder {
    Value,
    Gradient,
    Hessian,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
    pub hess: Option<Matrix>,
}

// ---------------------------------------------------------------------------
// LocalObjective
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// f(x) = 0.5 x^T A x + b^T x with A symmetric PSD.
    Quadratic { a: Matrix, b: Vec<f64> },
    /// f(x) = sum_l log(1 + exp(-y_l a_l^T x)) + (mu_reg/2) ||x||^2.
    GlmLogistic {
        /// Feature rows, one per sample (l x d).
        features: Matrix,
        /// Labels in {-1, +1}.
        labels: Vec<f64>,
        mu_reg: f64,
    },
}

/// Per-node oracle: value, gradient, Hessian, and the smoothness /
/// strong-convexity constants the schedulers consume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalObjective {
    dim: usize,
    kind: ObjectiveKind,
    /// Gradient Lipschitz constant.
    l1: f64,
    /// Hessian Lipschitz constant.
    l2: f64,
    /// Strong convexity modulus (0 for merely convex nodes).
    mu: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + exp(-u)), stable for large |u|.
fn softplus_neg(u: f64) -> f64 {
    (-u).max(0.0) + (-u.abs()).exp().ln_1p()
}

impl LocalObjective {
    pub fn quadratic(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != b.len() {
            return Err(Error::Argument("quadratic: A must be d x d matching b".into()));
        }
        let scale = a.frobenius_norm().max(1.0);
        if a.max_symmetry_defect() > 1e-10 * scale {
            return Err(Error::Argument("quadratic: A must be symmetric".into()));
        }
        let eig = sym_eigen(&a);
        let lam_min = eig.values[0];
        let lam_max = *eig.values.last().unwrap();
        if lam_min < -1e-9 * scale {
            return Err(Error::Argument(format!(
                "quadratic: A must be PSD (lambda_min = {lam_min:.3e})"
            )));
        }
        let dim = b.len();
        Ok(Self {
            dim,
            kind: ObjectiveKind::Quadratic { a, b },
            l1: lam_max.max(0.0),
            l2: 0.0,
            mu: lam_min.max(0.0),
        })
    }

    pub fn glm_logistic(features: Matrix, labels: Vec<f64>, mu_reg: f64) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Argument("glm: one label per feature row".into()));
        }
        if mu_reg < 0.0 {
            return Err(Error::Argument("glm: mu_reg must be nonnegative".into()));
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::Argument("glm: labels must be +-1".into()));
        }
        let dim = features.cols();
        // Gram = sum_l a_l a_l^T; sigma'' of the logistic link is at most 1/4.
        let gram = features.transpose().matmul(&features);
        let lam_max = sym_eigen(&gram).values.last().copied().unwrap_or(0.0).max(0.0);
        let l1 = mu_reg + 0.25 * lam_max;
        // |sigma'''| <= 1/(6 sqrt(3)), so L2 <= (1/(6 sqrt 3)) sum ||a_l||^3.
        let cube_sum: f64 = (0..features.rows()).map(|l| norm2(features.row(l)).powi(3)).sum();
        let l2 = cube_sum / (6.0 * 3.0f64.sqrt());
        Ok(Self {
            dim,
            kind: ObjectiveKind::GlmLogistic { features, labels, mu_reg },
            l1,
            l2,
            mu: mu_reg,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn is_glm(&self) -> bool {
        matches!(self.kind, ObjectiveKind::GlmLogistic { .. })
    }

    /// Evaluate value and, as requested, gradient / Hessian at `x`.
    pub fn eval(&self, x: &[f64], order: DerivOrder) -> Result<Evaluation> {
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "eval: point has dim {}, objective expects {}",
                x.len(),
                self.dim
            )));
        }
        if !all_finite(x) {
            return Err(Error::Domain("eval: non-finite coordinate in x".into()));
        }
        match &self.kind {
            ObjectiveKind::Quadratic { a, b } => {
                let ax = a.matvec(x);
                let value = 0.5 * dot(&ax, x) + dot(b, x);
                let grad = match order {
                    DerivOrder::Value => None,
                    _ => {
                        let mut g = ax;
                        axpy(1.0, b, &mut g);
                        Some(g)
                    }
                };
                let hess = match order {
                    DerivOrder::Hessian => Some(a.clone()),
                    _ => None,
                };
                Ok(Evaluation { value, grad, hess })
            }
            ObjectiveKind::GlmLogistic { features, labels, mu_reg } => {
                let d = self.dim;
                let mut value = 0.5 * mu_reg * dot(x, x);
                let mut grad = if order == DerivOrder::Value { None } else { Some(vec![0.0; d]) };
                let mut hess = if order == DerivOrder::Hessian {
                    let mut h = Matrix::zeros(d, d);
                    for i in 0..d {
                        h.set(i, i, *mu_reg);
                    }
                    Some(h)
                } else {
                    None
                };
                if let Some(g) = grad.as_mut() {
                    axpy(*mu_reg, x, g);
                }
                for l in 0..features.rows() {
                    let a = features.row(l);
                    let y = labels[l];
                    let u = y * dot(a, x);
                    value += softplus_neg(u);
                    if let Some(g) = grad.as_mut() {
                        let coef = y * (sigmoid(u) - 1.0);
                        axpy(coef, a, g);
                    }
                    if let Some(h) = hess.as_mut() {
                        let s = sigmoid(u);
                        let w = s * (1.0 - s);
                        for i in 0..d {
                            let wai = w * a[i];
                            if wai == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                let v = h.get(i, j) + wai * a[j];
                                h.set(i, j, v);
                            }
                        }
                    }
                }
                Ok(Evaluation { value, grad, hess })
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x, DerivOrder::Value)?.value)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x, DerivOrder::Gradient)?.grad.unwrap())
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Matrix> {
        Ok(self.eval(x, DerivOrder::Hessian)?.hess.unwrap())
    }
}

// ---------------------------------------------------------------------------
// ProblemSuite
// ---------------------------------------------------------------------------

/// A full decentralized problem: m local objectives of common dimension plus
/// the aggregate constants used throughout the schedules.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSuite {
    objectives: Vec<LocalObjective>,
    dim: usize,
    l1_bar: f64,
    l2_bar: f64,
    mu_bar: f64,
    mu_hat: f64,
    l1_max: f64,
    l2_max: f64,
}

impl ProblemSuite {
    pub fn new(objectives: Vec<LocalObjective>) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::Argument("suite needs at least one objective".into()));
        }
        let dim = objectives[0].dim();
        if objectives.iter().any(|o| o.dim() != dim) {
            return Err(Error::Argument("suite objectives must share a dimension".into()));
        }
        let m = objectives.len() as f64;
        let l1_bar = objectives.iter().map(|o| o.l1()).sum::<f64>() / m;
        let l2_bar = objectives.iter().map(|o| o.l2()).sum::<f64>() / m;
        let mu_bar = objectives.iter().map(|o| o.mu()).sum::<f64>() / m;
        let mu_hat = objectives.iter().map(|o| o.mu()).fold(f64::INFINITY, f64::min);
        let l1_max = objectives.iter().map(|o| o.l1()).fold(0.0, f64::max);
        let l2_max = objectives.iter().map(|o| o.l2()).fold(0.0, f64::max);
        Ok(Self { objectives, dim, l1_bar, l2_bar, mu_bar, mu_hat, l1_max, l2_max })
    }

    pub fn node_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn objective(&self, i: usize) -> &LocalObjective {
        &self.objectives[i]
    }

    pub fn objectives(&self) -> &[LocalObjective] {
        &self.objectives
    }

    pub fn l1_bar(&self) -> f64 {
        self.l1_bar
    }

    pub fn l2_bar(&self) -> f64 {
        self.l2_bar
    }

    pub fn mu_bar(&self) -> f64 {
        self.mu_bar
    }

    pub fn mu_hat(&self) -> f64 {
        self.mu_hat
    }

    pub fn l1_max(&self) -> f64 {
        self.l1_max
    }

    pub fn l2_max(&self) -> f64 {
        self.l2_max
    }

    pub fn is_glm(&self) -> bool {
        self.objectives.iter().all(|o| o.is_glm())
    }

    /// Global objective f(x) = (1/m) sum_i f_i(x).
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let mut v = 0.0;
        for o in &self.objectives {
            v += o.value(x)?;
        }
        Ok(v / self.objectives.len() as f64)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        for o in &self.objectives {
            axpy(1.0, &o.gradient(x)?, &mut g);
        }
        let inv_m = 1.0 / self.objectives.len() as f64;
        Ok(g.iter().map(|v| v * inv_m).collect())
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Matrix> {
        let mut h = Matrix::zeros(self.dim, self.dim);
        for o in &self.objectives {
            h = h.add(&o.hessian(x)?);
        }
        Ok(h.scaled(1.0 / self.objectives.len() as f64))
    }
}

// ---------------------------------------------------------------------------
// Suite generation
// ---------------------------------------------------------------------------

fn default_b_scale() -> f64 {
    1.0
}

fn default_feature_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SuiteFamily {
    Quadratic {
        /// Target largest eigenvalue per node.
        l1: f64,
        /// Target smallest eigenvalue per node.
        mu: f64,
        /// Fraction of nodes whose smallest eigenvalue is forced to zero
        /// (convex-but-not-strongly-convex nodes).
        #[serde(default)]
        singular_fraction: f64,
        #[serde(default = "default_b_scale")]
        b_scale: f64,
    },
    GlmLogistic {
        samples_per_node: usize,
        #[serde(default = "default_feature_scale")]
        feature_scale: f64,
        mu_reg: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub family: SuiteFamily,
    /// Node count m.
    pub nodes: usize,
    /// Dimension d.
    pub dim: usize,
    /// In [0, 1]: how different the local objectives are. 0 = identical nodes.
    #[serde(default)]
    pub heterogeneity: f64,
}

/// Random orthogonal matrix: eigenvectors of a random symmetric matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut s = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v: f64 = rng.random_range(-1.0..1.0);
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    sym_eigen(&s).vectors
}

/// Deterministic suite construction: identical calls with identical
/// `(spec, seed)` yield bit-identical suites.
pub fn make_suite(spec: &SuiteSpec, seed: u64) -> Result<ProblemSuite> {
    if spec.nodes < 2 {
        return Err(Error::Config("suite needs m >= 2 nodes".into()));
    }
    if spec.dim < 1 {
        return Err(Error::Config("suite needs d >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.heterogeneity) {
        return Err(Error::Config("heterogeneity must lie in [0, 1]".into()));
    }
    let het = spec.heterogeneity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.nodes;
    let d = spec.dim;

    match &spec.family {
        SuiteFamily::Quadratic { l1, mu, singular_fraction, b_scale } => {
            if *mu > *l1 {
                return Err(Error::Config(format!("requested mu {mu} exceeds requested l1 {l1}")));
            }
            if *mu < 0.0 || *l1 <= 0.0 {
                return Err(Error::Config("quadratic suite needs l1 > 0 and mu >= 0".into()));
            }
            if !(0.0..=1.0).contains(singular_fraction) {
                return Err(Error::Config("singular_fraction must lie in [0, 1]".into()));
            }
            let shared_rotation = random_orthogonal(d, &mut rng);
            let shared_b: Vec<f64> =
                (0..d).map(|_| rng.random_range(-1.0..1.0) * b_scale).collect();
            let n_singular = (singular_fraction * m as f64).round() as usize;

            let mut objectives = Vec::with_capacity(m);
            for node in 0..m {
                let mu_node = if node < n_singular { 0.0 } else { *mu };
                // Eigenvalues: exact endpoints, jittered geometric interior.
                let lo = mu_node.max(l1 * 1e-6);
                let mut eigs = vec![0.0; d];
                eigs[0] = mu_node;
                if d > 1 {
                    eigs[d - 1] = *l1;
                    for j in 1..d - 1 {
                        let t = j as f64 / (d - 1) as f64;
                        let base = lo * (l1 / lo).powf(t);
                        let jitter = 1.0 + 0.5 * het * rng.random_range(-1.0..1.0f64);
                        eigs[j] = (base * jitter).clamp(mu_node, *l1);
                    }
                }
                let q = if het == 0.0 {
                    shared_rotation.clone()
                } else {
                    random_orthogonal(d, &mut rng)
                };
                // A = Q diag(eigs) Q^T
                let mut a = Matrix::zeros(d, d);
                for (k, lam) in eigs.iter().enumerate() {
                    if *lam == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        let qik = q.get(i, k);
                        if qik == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let v = a.get(i, j) + lam * qik * q.get(j, k);
                            a.set(i, j, v);
                        }
                    }
                }
                a.symmetrize();
                let b: Vec<f64> = shared_b
                    .iter()
                    .map(|v| v + het * b_scale * rng.random_range(-1.0..1.0))
                    .collect();
                objectives.push(LocalObjective::quadratic(a, b)?);
            }
            ProblemSuite::new(objectives)
        }
        SuiteFamily::GlmLogistic { samples_per_node, feature_scale, mu_reg } => {
            if *samples_per_node == 0 {
                return Err(Error::Config("glm suite needs samples_per_node >= 1".into()));
            }
            if *mu_reg < 0.0 {
                return Err(Error::Config("mu_reg must be nonnegative".into()));
            }
            let ell = *samples_per_node;
            let per_entry = feature_scale / (d as f64).sqrt();
            // Shared dataset blended with per-node data by the heterogeneity level.
            let base: Vec<Vec<f64>> = (0..ell)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) * per_entry).collect())
                .collect();
            let planted: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut objectives = Vec::with_capacity(m);
            for _node in 0..m {
                let mut rows = Vec::with_capacity(ell);
                let mut labels = Vec::with_capacity(ell);
                for l in 0..ell {
                    let own: Vec<f64> =
                        (0..d).map(|_| rng.random_range(-1.0..1.0) * per_entry).collect();
                    let row: Vec<f64> = base[l]
                        .iter()
                        .zip(&own)
                        .map(|(b, o)| (1.0 - het) * b + het * o)
                        .collect();
                    let margin = dot(&row, &planted) + 0.5 * rng.random_range(-1.0..1.0);
                    labels.push(if margin >= 0.0 { 1.0 } else { -1.0 });
                    rows.push(row);
                }
                let features = Matrix::from_rows(&rows)?;
                objectives.push(LocalObjective::glm_logistic(features, labels, *mu_reg)?);
            }
            ProblemSuite::new(objectives)
        }
    }
}

// ---------------------------------------------------------------------------
// Reference solve
// ---------------------------------------------------------------------------

/// Ground-truth quantities the schedulers need; produced by a centralized
/// solve on the exact average objective.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// Worst-case distance to x* over the run (Lebesgue-set diameter proxy),
    /// already inflated by the x2 safety factor.
    pub d: f64,
    /// Gradient heterogeneity at the optimum.
    pub zeta_g: f64,
    /// Hessian heterogeneity at the optimum (Frobenius).
    pub zeta_h: f64,
    /// Trajectory-radius bound for the accelerated analysis, inflated x2.
    pub r_bar: f64,
}

/// Centralized adaptive cubic Newton on the average objective, run to
/// gradient norm `eps_ref`. `x0` is the common decentralized start.
pub fn reference_solve(suite: &ProblemSuite, eps_ref: f64, x0: &[f64]) -> Result<ReferenceSolution> {
    if eps_ref <= 0.0 {
        return Err(Error::Argument("eps_ref must be positive".into()));
    }
    if x0.len() != suite.dim() {
        return Err(Error::Argument("x0 dimension mismatch".into()));
    }
    let mut x = x0.to_vec();
    let mut trajectory = vec![x.clone()];
    let l_floor = 1e-8 * (1.0 + suite.l1_bar());
    let mut l_t = suite.l2_bar().max(l_floor);
    let mut converged = false;

    for _iter in 0..500 {
        let g = suite.gradient(&x)?;
        if norm2(&g) <= eps_ref {
            converged = true;
            break;
        }
        let h = suite.hessian(&x)?;
        let f_x = suite.value(&x)?;
        let mut accepted = false;
        for _attempt in 0..60 {
            let model = CubicModel::new(x.clone(), g.clone(), h.clone(), 0.0, l_t)?;
            let s = solve_cubic(&model, 1e-12)?;
            let mut cand = x.clone();
            axpy(1.0, &s, &mut cand);
            let f_cand = suite.value(&cand)?;
            if f_cand <= f_x + 1e-12 * (1.0 + f_x.abs()) {
                x = cand;
                accepted = true;
                break;
            }
            l_t *= 2.0;
        }
        if !accepted {
            return Err(Error::OracleFailure("reference solve: no acceptable step".into()));
        }
        l_t = (l_t / 1.5).max(l_floor);
        trajectory.push(x.clone());
    }
    if !converged {
        let g = suite.gradient(&x)?;
        if norm2(&g) > eps_ref {
            return Err(Error::OracleFailure(format!(
                "reference solve: gradient norm {:.3e} above eps_ref {:.3e} after cap",
                norm2(&g),
                eps_ref
            )));
        }
    }

    let x_star = x;
    let f_star = suite.value(&x_star)?;
    let max_radius = trajectory
        .iter()
        .map(|p| norm2(&sub(p, &x_star)))
        .fold(0.0f64, f64::max);
    let d = 2.0 * max_radius;
    let r_bar = 2.0 * max_radius;

    let m = suite.node_count() as f64;
    let h_star = suite.hessian(&x_star)?;
    let mut zg2 = 0.0;
    let mut zh2 = 0.0;
    for o in suite.objectives() {
        zg2 += norm2(&o.gradient(&x_star)?).powi(2);
        zh2 += o.hessian(&x_star)?.sub(&h_star).frobenius_norm().powi(2);
    }
    Ok(ReferenceSolution {
        x_star,
        f_star,
        d,
        zeta_g: (zg2 / m).sqrt(),
        zeta_h: (zh2 / m).sqrt(),
        r_bar,
    })
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub grad_rel_err: f64,
    pub hess_rel_err: f64,
    pub h_used: f64,
}

/// Central-difference check of the gradient against the value oracle and of
/// the Hessian against the gradient oracle. Report-only: h is clamped into
/// [1e-7, 1e-3] * (1 + ||x||).
pub fn finite_difference_check(obj: &LocalObjective, x: &[f64], h: f64) -> Result<FdReport> {
    let scale = 1.0 + norm2(x);
    let h = h.clamp(1e-7 * scale, 1e-3 * scale);
    let d = obj.dim();
    let grad = obj.gradient(x)?;
    let hess = obj.hessian(x)?;

    let mut fd_grad = vec![0.0; d];
    let mut fd_hess = Matrix::zeros(d, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let f_plus = obj.value(&xp)?;
        let g_plus = obj.gradient(&xp)?;
        xp[j] = x[j] - h;
        let f_minus = obj.value(&xp)?;
        let g_minus = obj.gradient(&xp)?;
        xp[j] = x[j];
        fd_grad[j] = (f_plus - f_minus) / (2.0 * h);
        for i in 0..d {
            fd_hess.set(i, j, (g_plus[i] - g_minus[i]) / (2.0 * h));
        }
    }
    let grad_rel_err = norm2(&sub(&fd_grad, &grad)) / norm2(&grad).max(1.0);
    let hess_rel_err = fd_hess.sub(&hess).frobenius_norm() / hess.frobenius_norm().max(1.0);
    Ok(FdReport { grad_rel_err, hess_rel_err, h_used: h })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
