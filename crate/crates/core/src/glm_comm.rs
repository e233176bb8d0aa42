//! Communication-efficient Hessian exchange for generalized linear models:
//! one-time dataset replication by flooding, then consensus over per-sample
//! second-derivative weight vectors instead of d x d matrices, with optional
//! top-k compression of the local block.
//!
//! The weight-space stack is linearly equivalent to the dense Hessian stack:
//! node j's consensus row holds m * [h_j, mu_reg_j] in its own block and zeros
//! elsewhere, so mixing + reconstruction reproduces the dense path exactly.

use crate::consensus::{
    ConsensusEngine, ConsensusReport, HessianAverage, HessianAverager, RoundsRequest, Stacked,
    StackLabel,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigen, Matrix};
use crate::objectives::{LocalObjective, ObjectiveKind, ProblemSuite};
use crate::parallel::map_indexed;

// ---------------------------------------------------------------------------
// Weight vectors
// ---------------------------------------------------------------------------

/// Per-sample link second derivatives at the owner's evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmWeights {
    pub owner: usize,
    pub h: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// h entries: sigma'(a^T x) for the logistic link (label-independent); the
/// l2 term is carried separately and re-added at reconstruction.
pub fn glm_weights(obj: &LocalObjective, owner: usize, x: &[f64]) -> Result<GlmWeights> {
    match obj.kind() {
        ObjectiveKind::GlmLogistic { features, .. } => {
            let h = (0..features.rows())
                .map(|l| {
                    let s = sigmoid(dot(features.row(l), x));
                    s * (1.0 - s)
                })
                .collect();
            Ok(GlmWeights { owner, h })
        }
        _ => Err(Error::Argument("glm_weights: objective is not a GLM".into())),
    }
}

/// Keep the k largest-magnitude entries, zero the rest; ties break toward the
/// lowest index. k is clamped into [1, len].
pub fn topk_compress(w: &GlmWeights, k: usize) -> GlmWeights {
    let ell = w.h.len();
    let k = k.clamp(1, ell.max(1));
    if k >= ell {
        return w.clone();
    }
    let mut order: Vec<usize> = (0..ell).collect();
    // Sort by descending magnitude, then ascending index.
    order.sort_by(|&a, &b| {
        w.h[b]
            .abs()
            .partial_cmp(&w.h[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut h = vec![0.0; ell];
    for &idx in order.iter().take(k) {
        h[idx] = w.h[idx];
    }
    GlmWeights { owner: w.owner, h }
}

// ---------------------------------------------------------------------------
// Dataset replication
// ---------------------------------------------------------------------------

/// Every node's dataset, replicated everywhere by flooding over the schedule.
#[derive(Clone, Debug)]
pub struct ReplicatedData {
    features: Vec<Matrix>,
    mu_regs: Vec<f64>,
    sample_counts: Vec<usize>,
    /// Offset of node j's weight block inside a consensus row; the block is
    /// [h_j (ell_j entries), mu_reg_j].
    offsets: Vec<usize>,
    row_width: usize,
    pub fingerprint: u64,
    pub steps_used: usize,
    /// Scalars moved over edges during flooding (charged once).
    pub scalar_cost: f64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Flood all datasets over the schedule (starting at `start_step`) until every
/// node holds every block. Synchronous: a step forwards what was held at its
/// start. Cost counts features, labels, and the regularizer scalar per block.
pub fn replicate_datasets(
    suite: &ProblemSuite,
    schedule: &crate::network::TopologySchedule,
    start_step: usize,
    max_steps: usize,
) -> Result<ReplicatedData> {
    if !suite.is_glm() {
        return Err(Error::Argument("dataset replication needs a GLM suite".into()));
    }
    let m = suite.node_count();
    let d = suite.dim();
    let mut features = Vec::with_capacity(m);
    let mut mu_regs = Vec::with_capacity(m);
    let mut sample_counts = Vec::with_capacity(m);
    for o in suite.objectives() {
        match o.kind() {
            ObjectiveKind::GlmLogistic { features: f, mu_reg, .. } => {
                features.push(f.clone());
                mu_regs.push(*mu_reg);
                sample_counts.push(f.rows());
            }
            _ => unreachable!(),
        }
    }
    // Block transfer size: ell rows of d features, ell labels, one mu_reg.
    let block_scalars: Vec<f64> =
        sample_counts.iter().map(|ell| (*ell * (d + 1) + 1) as f64).collect();

    let mut holdings: Vec<Vec<bool>> = (0..m)
        .map(|i| (0..m).map(|j| j == i).collect())
        .collect();
    let complete = |h: &Vec<Vec<bool>>| h.iter().all(|row| row.iter().all(|x| *x));
    let mut steps_used = 0usize;
    let mut scalar_cost = 0.0f64;
    while !complete(&holdings) {
        if steps_used >= max_steps {
            return Err(Error::ContractionFailure(format!(
                "dataset replication incomplete after {max_steps} steps"
            )));
        }
        let g = schedule.graph_at(start_step + steps_used);
        let snapshot = holdings.clone();
        for (a, b) in g.edges() {
            for blk in 0..m {
                if snapshot[a][blk] && !holdings[b][blk] {
                    holdings[b][blk] = true;
                    scalar_cost += block_scalars[blk];
                }
                if snapshot[b][blk] && !holdings[a][blk] {
                    holdings[a][blk] = true;
                    scalar_cost += block_scalars[blk];
                }
            }
        }
        steps_used += 1;
    }

    let mut offsets = Vec::with_capacity(m);
    let mut off = 0usize;
    for ell in &sample_counts {
        offsets.push(off);
        off += ell + 1;
    }
    // Fingerprint over the replicated bytes; identical on every node by
    // construction of the (deterministic) flood.
    let mut bytes = Vec::new();
    for (f, mu) in features.iter().zip(&mu_regs) {
        for v in f.data() {
            bytes.extend_from_slice(&v.to_le_bits_bytes());
        }
        bytes.extend_from_slice(&mu.to_le_bits_bytes());
    }
    Ok(ReplicatedData {
        features,
        mu_regs,
        sample_counts,
        offsets,
        row_width: off,
        fingerprint: fnv1a(&bytes),
        steps_used,
        scalar_cost,
    })
}

trait F64Bytes {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl F64Bytes for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

impl ReplicatedData {
    pub fn row_width(&self) -> usize {
        self.row_width
    }

    /// Node j's initial consensus row: m * [h_j, mu_reg_j] in its own block.
    pub fn initial_row(&self, w: &GlmWeights) -> Vec<f64> {
        let m = self.features.len();
        let mut row = vec![0.0; self.row_width];
        let off = self.offsets[w.owner];
        for (l, hv) in w.h.iter().enumerate() {
            row[off + l] = m as f64 * hv;
        }
        row[off + self.sample_counts[w.owner]] = m as f64 * self.mu_regs[w.owner];
        row
    }

    /// (1/m) [ sum_jl w_jl a_jl a_jl^T + (sum_j w_j,mu) I ] from a (mixed)
    /// consensus row.
    pub fn reconstruct(&self, row: &[f64]) -> Result<Matrix> {
        if row.len() != self.row_width {
            return Err(Error::Layout(format!(
                "weight row length {} does not match layout width {}",
                row.len(),
                self.row_width
            )));
        }
        let m = self.features.len();
        let d = self.features[0].cols();
        let mut h = Matrix::zeros(d, d);
        let mut reg = 0.0;
        for j in 0..m {
            let off = self.offsets[j];
            let f = &self.features[j];
            for l in 0..self.sample_counts[j] {
                let w = row[off + l];
                if w == 0.0 {
                    continue;
                }
                let a = f.row(l);
                for p in 0..d {
                    let wap = w * a[p];
                    if wap == 0.0 {
                        continue;
                    }
                    for q in 0..d {
                        let v = h.get(p, q) + wap * a[q];
                        h.set(p, q, v);
                    }
                }
            }
            reg += row[off + self.sample_counts[j]];
        }
        let mut out = h.scaled(1.0 / m as f64);
        out = out.plus_scaled_identity(reg / m as f64);
        out.symmetrize();
        Ok(out)
    }

    /// Operator norm of the reconstruction map in (weight l2) -> (Hessian
    /// Frobenius) geometry; converts Hessian-space targets into weight-space
    /// targets for adaptive round planning.
    pub fn reconstruction_gain(&self) -> f64 {
        let m = self.features.len() as f64;
        let d = self.features[0].cols();
        // Gram of the columns {vec(a a^T)/m} and {vec(I)/m}.
        let n = self.row_width;
        let mut cols: Vec<(usize, usize)> = Vec::with_capacity(n);
        for (j, ell) in self.sample_counts.iter().enumerate() {
            for l in 0..*ell {
                cols.push((j, l));
            }
            cols.push((j, usize::MAX)); // the mu slot
        }
        let mut gram = Matrix::zeros(n, n);
        for (ci, &(j1, l1)) in cols.iter().enumerate() {
            for (cj, &(j2, l2)) in cols.iter().enumerate().skip(ci) {
                let v = match (l1, l2) {
                    (usize::MAX, usize::MAX) => d as f64,
                    (usize::MAX, l) => {
                        let a = self.features[j2].row(l);
                        dot(a, a)
                    }
                    (l, usize::MAX) => {
                        let a = self.features[j1].row(l);
                        dot(a, a)
                    }
                    (la, lb) => dot(self.features[j1].row(la), self.features[j2].row(lb)).powi(2),
                } / (m * m);
                gram.set(ci, cj, v);
                gram.set(cj, ci, v);
            }
        }
        let lam_max = sym_eigen(&gram).values.last().copied().unwrap_or(0.0).max(0.0);
        lam_max.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Hessian backend
// ---------------------------------------------------------------------------

/// Registers the weight-vector exchange as an alternative Hessian consensus
/// backend for the drivers.
pub struct GlmHessianBackend {
    data: ReplicatedData,
    top_k: Option<usize>,
    recon_gain: f64,
}

impl GlmHessianBackend {
    /// Replicates the datasets over the engine's schedule and charges the
    /// one-time communication cost to the engine counters. Calling this on an
    /// engine twice would re-pay the cost; hold onto the backend instead.
    pub fn new(
        suite: &ProblemSuite,
        engine: &mut ConsensusEngine,
        top_k: Option<usize>,
    ) -> Result<Self> {
        let m = suite.node_count();
        let max_steps = 50 * m.max(2);
        let data = replicate_datasets(suite, engine.schedule(), engine.cursor, max_steps)?;
        engine.cursor += data.steps_used;
        engine.total_rounds += data.steps_used;
        engine.total_scalars += data.scalar_cost;
        let recon_gain = data.reconstruction_gain();
        Ok(Self { data, top_k, recon_gain })
    }

    pub fn data(&self) -> &ReplicatedData {
        &self.data
    }
}

impl HessianAverager for GlmHessianBackend {
    fn name(&self) -> &'static str {
        "glm"
    }

    fn average(
        &mut self,
        suite: &ProblemSuite,
        points: &[Vec<f64>],
        engine: &mut ConsensusEngine,
        rounds: RoundsRequest,
    ) -> Result<HessianAverage> {
        let m = suite.node_count();
        let weights = crate::dcn::collect(map_indexed(m, |i| {
            glm_weights(suite.objective(i), i, &points[i])
        }))?;
        // True average Hessian (uncompressed weights) for error measurement.
        let mut exact_mean_row = vec![0.0; self.data.row_width()];
        for w in &weights {
            let row = self.data.initial_row(w);
            for (acc, v) in exact_mean_row.iter_mut().zip(&row) {
                *acc += v / m as f64;
            }
        }
        let h_bar = self.data.reconstruct(&exact_mean_row)?;

        let rows: Vec<Vec<f64>> = weights
            .iter()
            .map(|w| {
                let sent = match self.top_k {
                    Some(k) => topk_compress(w, k),
                    None => w.clone(),
                };
                self.data.initial_row(&sent)
            })
            .collect();
        let stack = Stacked::from_rows(StackLabel::GlmWeights, &rows)?;
        // Adaptive Hessian targets are stated in Hessian space; divide by the
        // reconstruction gain to get the weight-space contraction target.
        let req = match rounds {
            RoundsRequest::Adaptive { target } => RoundsRequest::Adaptive {
                target: target / self.recon_gain.max(1e-300),
            },
            fixed => fixed,
        };
        let (mixed, rep) = engine.run_requested(&stack, req)?;

        let mut hessians = Vec::with_capacity(m);
        let mut max_dev = 0.0f64;
        let mut frob_sq = 0.0f64;
        for i in 0..m {
            let h = self.data.reconstruct(mixed.row(i))?;
            let dev = h.sub(&h_bar).frobenius_norm();
            max_dev = max_dev.max(dev);
            frob_sq += dev * dev;
            hessians.push(h);
        }
        Ok(HessianAverage {
            hessians,
            report: ConsensusReport {
                rounds_used: rep.rounds_used,
                max_row_deviation: max_dev,
                frob_deviation: frob_sq.sqrt(),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
