//! Time-varying graph sequences, Metropolis mixing matrices, Chebyshev
//! accelerated mixing for static graphs, and estimation of the contraction
//! pair (tau, lambda).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigma_max, singular_values, Matrix};

// ---------------------------------------------------------------------------
// GraphSnapshot
// ---------------------------------------------------------------------------

/// Undirected simple graph on nodes 0..m.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSnapshot {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl GraphSnapshot {
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Argument("graph: self-loop".into()));
            }
            if a >= m || b >= m {
                return Err(Error::Argument("graph: node index out of range".into()));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { m, edges: set })
    }

    pub fn empty(m: usize) -> Self {
        Self { m, edges: BTreeSet::new() }
    }

    pub fn complete(m: usize) -> Self {
        let mut edges = BTreeSet::new();
        for i in 0..m {
            for j in (i + 1)..m {
                edges.insert((i, j));
            }
        }
        Self { m, edges }
    }

    pub fn ring(m: usize) -> Self {
        let mut edges = BTreeSet::new();
        for i in 0..m {
            let j = (i + 1) % m;
            if i != j {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        Self { m, edges }
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|(a, b)| *a == i || *b == i).count()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn union(&self, other: &GraphSnapshot) -> GraphSnapshot {
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().copied());
        GraphSnapshot { m: self.m, edges }
    }

    /// Connectivity by BFS.
    pub fn is_connected(&self) -> bool {
        if self.m <= 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.m];
        let mut queue = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push(w);
                }
            }
        }
        count == self.m
    }

    /// Graph eccentricity of the farthest pair (max BFS distance); the number
    /// of synchronous flooding steps needed to reach every node. Errors on
    /// disconnected graphs.
    pub fn diameter(&self) -> Result<usize> {
        if !self.is_connected() {
            return Err(Error::Argument("diameter of a disconnected graph".into()));
        }
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut worst = 0usize;
        for start in 0..self.m {
            let mut dist = vec![usize::MAX; self.m];
            dist[start] = 0;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        queue.push_back(w);
                    }
                }
            }
            worst = worst.max(*dist.iter().max().unwrap());
        }
        Ok(worst)
    }
}

// ---------------------------------------------------------------------------
// MixingMatrix
// ---------------------------------------------------------------------------

pub const STOCHASTICITY_TOL: f64 = 1e-12;

/// Doubly stochastic, graph-compatible mixing matrix.
#[derive(Clone, Debug)]
pub struct MixingMatrix {
    w: Matrix,
}

impl MixingMatrix {
    /// Metropolis weights: W_ij = 1/(1 + max(deg i, deg j)) on edges, the
    /// diagonal completes the row sums to 1.
    pub fn metropolis(g: &GraphSnapshot) -> MixingMatrix {
        let m = g.node_count();
        let deg: Vec<usize> = (0..m).map(|i| g.degree(i)).collect();
        let mut w = Matrix::zeros(m, m);
        for (a, b) in g.edges() {
            let v = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
            w.set(a, b, v);
            w.set(b, a, v);
        }
        for i in 0..m {
            let off: f64 = (0..m).filter(|j| *j != i).map(|j| w.get(i, j)).sum();
            w.set(i, i, 1.0 - off);
        }
        MixingMatrix { w }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn size(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w.get(i, j)
    }

    /// Double stochasticity and (against `graph`) network compatibility.
    pub fn validate(&self, graph: &GraphSnapshot) -> Result<()> {
        let m = self.size();
        if graph.node_count() != m {
            return Err(Error::Argument("mixing matrix size mismatch".into()));
        }
        for i in 0..m {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..m {
                let v = self.w.get(i, j);
                if v < -STOCHASTICITY_TOL {
                    return Err(Error::Argument(format!("negative weight at ({i},{j})")));
                }
                row += v;
                col += self.w.get(j, i);
                if i != j && v != 0.0 && !graph.has_edge(i, j) {
                    return Err(Error::Argument(format!(
                        "nonzero weight on a non-edge ({i},{j})"
                    )));
                }
            }
            if (row - 1.0).abs() > STOCHASTICITY_TOL || (col - 1.0).abs() > STOCHASTICITY_TOL {
                return Err(Error::Argument(format!(
                    "row/col sums off at {i}: {row} / {col}"
                )));
            }
        }
        Ok(())
    }

    /// Second largest singular value.
    pub fn sigma2(&self) -> f64 {
        let sv = singular_values(&self.w);
        if sv.len() > 1 {
            sv[1]
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Topology schedules
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologyKind {
    /// Same graph at every step.
    Static { shape: StaticShape },
    /// Fresh random connected graph at every step.
    PerStepConnected {
        #[serde(default)]
        extra_edges: usize,
    },
    /// Round-robin partition of the ring into `tau` edge groups; the union of
    /// any `tau` consecutive steps is the full ring.
    TauConnected { tau: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StaticShape {
    Ring,
    Complete,
    RandomGeometric { radius: f64 },
}

/// Deterministic sequence of graphs with per-step Metropolis mixing matrices
/// and the contraction pair (tau, lambda) of the consensus analysis.
#[derive(Clone, Debug)]
pub struct TopologySchedule {
    m: usize,
    kind: TopologyKind,
    seed: u64,
    /// Static graphs are built once; time-varying steps are derived on demand.
    static_graph: Option<GraphSnapshot>,
    static_matrix: Option<MixingMatrix>,
    tau: usize,
    lambda: f64,
}

/// Builds the schedule structure. The contraction pair is estimated separately
/// by [`estimate_contraction`] and installed with
/// [`TopologySchedule::set_contraction`].
pub fn generate(kind: TopologyKind, m: usize, seed: u64) -> Result<TopologySchedule> {
    if m < 1 {
        return Err(Error::Config("schedule needs m >= 1".into()));
    }
    let (static_graph, tau) = match &kind {
        TopologyKind::Static { shape } => {
            let g = match shape {
                StaticShape::Ring => GraphSnapshot::ring(m),
                StaticShape::Complete => GraphSnapshot::complete(m),
                StaticShape::RandomGeometric { radius } => {
                    if !(0.0..=2.0).contains(radius) {
                        return Err(Error::Config("random-geometric radius out of range".into()));
                    }
                    random_geometric(m, *radius, seed)?
                }
            };
            if m > 1 && !g.is_connected() {
                return Err(Error::Config("static graph is disconnected".into()));
            }
            (Some(g), 1)
        }
        TopologyKind::PerStepConnected { .. } => (None, 1),
        TopologyKind::TauConnected { tau } => {
            if *tau < 1 {
                return Err(Error::Config("tau-connected schedule needs tau >= 1".into()));
            }
            if m < 3 && *tau > 1 {
                return Err(Error::Config("tau-connected ring partition needs m >= 3".into()));
            }
            (None, *tau)
        }
    };
    let static_matrix = static_graph.as_ref().map(MixingMatrix::metropolis);
    Ok(TopologySchedule { m, kind, seed, static_graph, static_matrix, tau, lambda: f64::NAN })
}

fn random_geometric(m: usize, radius: f64, seed: u64) -> Result<GraphSnapshot> {
    // Disconnected draws are re-sampled a bounded number of times.
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let pts: Vec<(f64, f64)> =
            (0..m).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
        let mut edges = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                let dx = pts[i].0 - pts[j].0;
                let dy = pts[i].1 - pts[j].1;
                if (dx * dx + dy * dy).sqrt() <= radius {
                    edges.push((i, j));
                }
            }
        }
        let g = GraphSnapshot::new(m, edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Config("random-geometric graph stayed disconnected after 100 draws".into()))
}

impl TopologySchedule {
    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> &TopologyKind {
        &self.kind
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_contraction(&mut self, tau: usize, lambda: f64) {
        self.tau = tau;
        self.lambda = lambda;
    }

    pub fn is_static(&self) -> bool {
        self.static_graph.is_some()
    }

    pub fn static_matrix(&self) -> Option<&MixingMatrix> {
        self.static_matrix.as_ref()
    }

    /// Graph at step k; pure function of (kind, seed, k).
    pub fn graph_at(&self, k: usize) -> GraphSnapshot {
        match &self.kind {
            TopologyKind::Static { .. } => self.static_graph.clone().unwrap(),
            TopologyKind::PerStepConnected { extra_edges } => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                random_connected(self.m, *extra_edges, &mut rng)
            }
            TopologyKind::TauConnected { tau } => {
                let group = k % tau;
                let edges = (0..self.m)
                    .filter(|i| i % tau == group || self.m == 2)
                    .map(|i| (i, (i + 1) % self.m))
                    .filter(|(a, b)| a != b)
                    .collect::<Vec<_>>();
                GraphSnapshot::new(self.m, edges).unwrap()
            }
        }
    }

    /// Mixing matrix at step k.
    pub fn matrix_at(&self, k: usize) -> MixingMatrix {
        if let Some(w) = &self.static_matrix {
            w.clone()
        } else {
            MixingMatrix::metropolis(&self.graph_at(k))
        }
    }

    /// Serialize the first `steps` graphs in the edge-list-per-step text
    /// format: a `step k` header followed by `i j` lines.
    pub fn to_edge_list_text(&self, steps: usize) -> String {
        let mut out = String::new();
        for k in 0..steps {
            let g = self.graph_at(k);
            let _ = writeln!(out, "step {k}");
            for (a, b) in g.edges() {
                let _ = writeln!(out, "{a} {b}");
            }
        }
        out
    }
}

/// Parse the edge-list-per-step format back into graph snapshots.
pub fn parse_edge_list_text(text: &str, m: usize) -> Result<Vec<GraphSnapshot>> {
    let mut steps: Vec<Vec<(usize, usize)>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("step ") {
            let idx: usize = rest
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad step header at line {}", lineno + 1)))?;
            if idx != steps.len() {
                return Err(Error::Argument(format!(
                    "step headers out of order at line {}",
                    lineno + 1
                )));
            }
            steps.push(Vec::new());
        } else {
            let mut it = line.split_whitespace();
            let a: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Argument(format!("bad edge at line {}", lineno + 1)))?;
            let b: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Argument(format!("bad edge at line {}", lineno + 1)))?;
            steps
                .last_mut()
                .ok_or_else(|| Error::Argument("edge line before any step header".into()))?
                .push((a, b));
        }
    }
    steps.into_iter().map(|e| GraphSnapshot::new(m, e)).collect()
}

fn random_connected(m: usize, extra_edges: usize, rng: &mut ChaCha8Rng) -> GraphSnapshot {
    // Random spanning tree (random attachment) plus optional extra edges.
    let mut edges = Vec::new();
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    for i in 1..m {
        let parent = perm[rng.random_range(0..i)];
        edges.push((perm[i], parent));
    }
    for _ in 0..extra_edges {
        let a = rng.random_range(0..m);
        let b = rng.random_range(0..m);
        if a != b {
            edges.push((a, b));
        }
    }
    GraphSnapshot::new(m, edges).unwrap()
}

// ---------------------------------------------------------------------------
// Contraction estimation
// ---------------------------------------------------------------------------

/// Safety discount applied to sampled (non-exact) contraction estimates.
pub const LAMBDA_SAFETY: f64 = 0.9;

/// Estimate lambda for the given window length `tau`.
///
/// Static schedules get the exact value 1 - sigma2(W); time-varying schedules
/// get 1 - max over `trials` sampled windows of sigma_max(W_tau^k - J/m).
/// The returned value is the raw estimate; callers apply [`LAMBDA_SAFETY`]
/// when the schedule is sampled rather than exact.
pub fn estimate_contraction(schedule: &TopologySchedule, tau: usize, trials: usize) -> Result<f64> {
    if tau < 1 || trials < 1 {
        return Err(Error::Argument("estimate_contraction: tau, trials >= 1".into()));
    }
    let m = schedule.node_count();
    if m == 1 {
        return Ok(1.0);
    }
    let lambda = if schedule.is_static() && tau == 1 {
        1.0 - schedule.static_matrix().unwrap().sigma2()
    } else {
        let mut worst = 0.0f64;
        for t in 0..trials {
            // Windows end at steps tau-1, 2*tau-1, ...
            let end = tau - 1 + t * tau;
            let mut prod = Matrix::identity(m);
            for back in 0..tau {
                let w = schedule.matrix_at(end - back);
                prod = prod.matmul(w.matrix());
            }
            // sigma_max(W_tau^k - (1/m) 1 1^T)
            let mut dev = prod;
            for i in 0..m {
                for j in 0..m {
                    dev.set(i, j, dev.get(i, j) - 1.0 / m as f64);
                }
            }
            worst = worst.max(sigma_max(&dev));
        }
        1.0 - worst
    };
    if lambda <= 0.0 {
        return Err(Error::ContractionFailure(format!(
            "lambda = {lambda:.3e}; union over tau = {tau} steps does not mix"
        )));
    }
    Ok(lambda.min(1.0))
}

// ---------------------------------------------------------------------------
// Chebyshev acceleration
// ---------------------------------------------------------------------------

/// Degree-K Chebyshev polynomial of a static mixing matrix, normalized so
/// P_K(1) = 1 (averages are preserved exactly). One application costs K
/// communication rounds and contracts the deviation by 1/T_K(1/sigma2).
#[derive(Clone, Debug)]
pub struct ChebyshevOperator {
    w: MixingMatrix,
    degree: usize,
    sigma2: f64,
    /// T_K(1/sigma2), the normalization that pins P_K(1) = 1.
    norm: f64,
}

fn cheb_t(k: usize, x: f64) -> f64 {
    let (mut t0, mut t1) = (1.0, x);
    if k == 0 {
        return t0;
    }
    for _ in 1..k {
        let t2 = 2.0 * x * t1 - t0;
        t0 = t1;
        t1 = t2;
    }
    t1
}

/// Builds the operator. `w` must come from a static connected graph.
pub fn chebyshev_operator(w: &MixingMatrix, degree: usize) -> Result<ChebyshevOperator> {
    if degree < 1 {
        return Err(Error::Config("chebyshev degree must be >= 1".into()));
    }
    let sigma2 = w.sigma2();
    if sigma2 >= 1.0 - 1e-12 {
        return Err(Error::Config("chebyshev needs a connected graph (sigma2 < 1)".into()));
    }
    let norm = if sigma2 <= 0.0 { 1.0 } else { cheb_t(degree, 1.0 / sigma2) };
    Ok(ChebyshevOperator { w: w.clone(), degree, sigma2, norm })
}

/// Degree for the standard K = ceil(sqrt(chi)) choice, chi = 1/lambda.
pub fn chebyshev_degree_for(w: &MixingMatrix) -> usize {
    let lambda = (1.0 - w.sigma2()).max(1e-12);
    (1.0 / lambda).sqrt().ceil() as usize
}

impl ChebyshevOperator {
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Contraction factor of one application on the deviation subspace.
    pub fn effective_contraction(&self) -> f64 {
        1.0 - 1.0 / self.norm
    }

    /// Apply P_K(W) to the rows of a stacked state (row-major m x width).
    /// `mix` must perform one plain W multiplication.
    pub fn apply<F>(&self, rows: &[f64], m: usize, width: usize, mix: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        assert_eq!(rows.len(), m * width);
        if self.sigma2 <= 0.0 {
            // Already exact averaging; one round suffices.
            return mix(rows);
        }
        let inv_s = 1.0 / self.sigma2;
        let mut t_prev = rows.to_vec();
        let mut t_cur = mix(rows).iter().map(|v| v * inv_s).collect::<Vec<f64>>();
        for _ in 1..self.degree {
            let wt = mix(&t_cur);
            let mut t_next = vec![0.0; rows.len()];
            for i in 0..rows.len() {
                t_next[i] = 2.0 * inv_s * wt[i] - t_prev[i];
            }
            t_prev = t_cur;
            t_cur = t_next;
        }
        t_cur.iter().map(|v| v / self.norm).collect()
    }

    pub fn mixing_matrix(&self) -> &MixingMatrix {
        &self.w
    }

    /// Dense P_K(W) (tests and spectral measurement only).
    pub fn dense(&self) -> Matrix {
        let m = self.w.size();
        let mut out = Matrix::zeros(m, m);
        for col in 0..m {
            let mut e = vec![0.0; m];
            e[col] = 1.0;
            // Column-by-column application with width 1 per node row.
            let col_result = self.apply(&e, m, 1, |rows| {
                let mut mixed = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += self.w.get(i, j) * rows[j];
                    }
                    mixed[i] = acc;
                }
                mixed
            });
            for i in 0..m {
                out.set(i, col, col_result[i]);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
