//! Pseudo-labeling of sampled frames.
//!
//! Sampled frames are clustered with k-means (k = number of tasks). Each
//! cluster is then matched to a task by solving a linear assignment problem
//! whose costs are distances between the cluster centroids and the per-task
//! mean vectors of the labeled training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::LabelerError;
use crate::types::{ChannelId, ChannelSchema, LabeledSample, SensorFrame, TaskLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Channels used for the cost matrix; `None` uses the whole schema.
    pub channels: Option<Vec<ChannelId>>,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig { k: TaskLabel::COUNT, restarts: 5, max_iter: 100, tol: 1e-6, channels: None }
    }
}

impl LabelerConfig {
    /// Schema indices of the cost channels.
    pub fn cost_channels(&self, schema: &ChannelSchema) -> Result<Option<Vec<usize>>, LabelerError> {
        match &self.channels {
            None => Ok(None),
            Some(names) => names
                .iter()
                .map(|c| {
                    schema
                        .index_of(c.as_str())
                        .ok_or(LabelerError::DimensionMismatch { expected: schema.len(), actual: 0 })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[&[f64]], limit: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for p in points {
        if !seen.iter().any(|q| q.iter().zip(p.iter()).all(|(a, b)| a.to_bits() == b.to_bits())) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> ClusterModel {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0usize; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            dists[i] = d;
        }
        // Empty clusters take the points farthest from their centroids.
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&j| sizes[j] += 1);
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                sizes[assignments[i]] -= 1;
                sizes[j] = 1;
                assignments[i] = j;
                dists[i] = 0.0;
                centroids[j] = points[i].to_vec();
            }
        }
        trace.push(dists.iter().sum());
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &j) in points.iter().zip(&assignments) {
            for (s, x) in sums[j].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let n = sizes[j] as f64;
            let next: Vec<f64> = sums[j].iter().map(|s| s / n).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < tol {
            // Final assignment against the converged centroids.
            for (i, p) in points.iter().enumerate() {
                let (j, d) = nearest(p, &centroids);
                assignments[i] = j;
                dists[i] = d;
            }
            trace.push(dists.iter().sum());
            break;
        }
    }
    ClusterModel { inertia: *trace.last().expect("at least one pass"), centroids, assignments, iterations, inertia_trace: trace }
}

/// Seeded k-means++ initialisation followed by Lloyd iterations, repeated
/// `restarts` times; the lowest-inertia run wins (earliest on ties).
pub fn kmeans(
    points: &[&[f64]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<ClusterModel, LabelerError> {
    if k == 0 {
        return Err(LabelerError::ZeroK);
    }
    if points.len() < k {
        return Err(LabelerError::TooFewPoints { n: points.len(), k });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(LabelerError::DimensionMismatch { expected: dim, actual: p.len() });
    }
    let distinct = distinct_count(points, k);
    if distinct < k {
        return Err(LabelerError::DegenerateClusters { distinct, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let model = lloyd(points, init, max_iter, tol);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Per-task mean vectors of labeled data, indexed by `TaskLabel::index()`.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub centroids: Vec<Vec<f64>>,
}

impl References {
    pub fn get(&self, label: TaskLabel) -> &[f64] {
        &self.centroids[label.index()]
    }
}

pub fn reference_centroids<'a, I>(samples: I) -> Result<References, LabelerError>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); TaskLabel::COUNT];
    let mut counts = [0usize; TaskLabel::COUNT];
    let mut dim = None;
    for s in samples {
        let v = s.frame.values();
        let d = *dim.get_or_insert(v.len());
        if v.len() != d {
            return Err(LabelerError::DimensionMismatch { expected: d, actual: v.len() });
        }
        let slot = &mut sums[s.label.index()];
        if slot.is_empty() {
            slot.resize(d, 0.0);
        }
        slot.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        counts[s.label.index()] += 1;
    }
    for l in TaskLabel::ALL {
        if counts[l.index()] == 0 {
            return Err(LabelerError::MissingLabel(l));
        }
    }
    let centroids = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    Ok(References { centroids })
}

/// Square matrix of label-to-cluster errors; rows follow `TaskLabel` order.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub e: Vec<Vec<f64>>,
}

fn project(v: &[f64], channels: Option<&[usize]>) -> Vec<f64> {
    match channels {
        None => v.to_vec(),
        Some(idx) => idx.iter().map(|&i| v[i]).collect(),
    }
}

/// `e[i][j]` = L2 distance between reference `i` and centroid `j`, over the
/// selected channels.
pub fn cost_matrix(
    refs: &[Vec<f64>],
    centroids: &[Vec<f64>],
    channels: Option<&[usize]>,
) -> Result<CostMatrix, LabelerError> {
    if refs.len() != centroids.len() {
        return Err(LabelerError::RefCountMismatch { refs: refs.len(), k: centroids.len() });
    }
    let dim = centroids.first().map_or(0, Vec::len);
    for v in refs.iter().chain(centroids) {
        if v.len() != dim {
            return Err(LabelerError::DimensionMismatch { expected: dim, actual: v.len() });
        }
    }
    if let Some(idx) = channels {
        if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
            return Err(LabelerError::DimensionMismatch { expected: dim, actual: bad + 1 });
        }
    }
    let centroids: Vec<Vec<f64>> = centroids.iter().map(|c| project(c, channels)).collect();
    let e = refs
        .iter()
        .map(|r| {
            let r = project(r, channels);
            centroids.iter().map(|c| sq_dist(&r, c).sqrt()).collect()
        })
        .collect();
    Ok(CostMatrix { e })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    /// `perm[i]` is the column (cluster) assigned to row (label) `i`.
    pub perm: Vec<usize>,
    pub total_error: f64,
}

impl AssignmentSolution {
    /// Label assigned to cluster `j`.
    pub fn label_of_cluster(&self, j: usize) -> Option<TaskLabel> {
        self.perm.iter().position(|&c| c == j).and_then(TaskLabel::from_index)
    }
}

/// Minimum-cost perfect matching of rows to columns (shortest augmenting
/// paths with potentials, O(n^3)). Returns `perm[row] = col`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    perm
}

fn perm_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal cost of the rows `from..` restricted to the `free` columns.
fn residual_optimum(cost: &[Vec<f64>], from: usize, free: &[usize]) -> f64 {
    if free.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = cost[from..].iter().map(|row| free.iter().map(|&j| row[j]).collect()).collect();
    perm_cost(&sub, &hungarian(&sub))
}

/// Exact solution of the label-to-cluster assignment problem. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn solve_assignment(e: &CostMatrix) -> Result<AssignmentSolution, LabelerError> {
    let cost = &e.e;
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(LabelerError::NonSquare { rows: n, cols: row.len() });
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(LabelerError::NonFinite(i, j));
        }
    }
    if n == 0 {
        return Ok(AssignmentSolution { perm: Vec::new(), total_error: 0.0 });
    }
    let optimum = perm_cost(cost, &hungarian(cost));
    let slack = 1e-12 * optimum.abs().max(1.0) * n as f64;

    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion.
    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    for i in 0..n {
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let rest: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let total = fixed + cost[i][j] + residual_optimum(cost, i + 1, &rest);
            if total <= optimum + slack {
                chosen = Some(pos);
                break;
            }
        }
        // Rounding can reject every column; fall back to the best one.
        let pos = chosen.unwrap_or_else(|| {
            (0..free.len())
                .min_by(|&a, &b| {
                    let ca = cost[i][free[a]]
                        + residual_optimum(cost, i + 1, &[&free[..a], &free[a + 1..]].concat());
                    let cb = cost[i][free[b]]
                        + residual_optimum(cost, i + 1, &[&free[..b], &free[b + 1..]].concat());
                    ca.total_cmp(&cb)
                })
                .expect("free columns remain")
        });
        let j = free.remove(pos);
        fixed += cost[i][j];
        perm.push(j);
    }
    let total_error = perm_cost(cost, &perm);
    Ok(AssignmentSolution { perm, total_error })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub samples: Vec<LabeledSample>,
    pub assignment: AssignmentSolution,
    pub clusters: ClusterModel,
    /// Fraction of frames whose pseudo-label disagrees with known truth.
    pub error_rate: Option<f64>,
}

impl PseudoLabelBatch {
    /// Scores the batch against ground-truth labels given in frame order.
    pub fn score(&mut self, truth: &[TaskLabel]) -> f64 {
        assert_eq!(truth.len(), self.samples.len(), "one truth label per frame");
        let wrong = self.samples.iter().zip(truth).filter(|(s, t)| s.label != **t).count();
        let rate = if truth.is_empty() { 0.0 } else { wrong as f64 / truth.len() as f64 };
        self.error_rate = Some(rate);
        rate
    }
}

/// Matches clusters to labels and labels every frame by its cluster.
pub fn label_clusters(
    frames: &[SensorFrame],
    clusters: ClusterModel,
    refs: &References,
    channels: Option<&[usize]>,
) -> Result<PseudoLabelBatch, LabelerError> {
    let costs = cost_matrix(&refs.centroids, &clusters.centroids, channels)?;
    let assignment = solve_assignment(&costs)?;
    let mut cluster_label = vec![TaskLabel::ScionCutting; assignment.perm.len()];
    for (i, &j) in assignment.perm.iter().enumerate() {
        cluster_label[j] = TaskLabel::from_index(i).expect("row per label");
    }
    let samples = frames
        .iter()
        .zip(&clusters.assignments)
        .map(|(f, &j)| LabeledSample::pseudo(f.clone(), cluster_label[j]))
        .collect();
    Ok(PseudoLabelBatch { samples, assignment, clusters, error_rate: None })
}

/// k-means over the snapshot, then label assignment against `refs`.
pub fn pseudo_label(
    snapshot: &[SensorFrame],
    refs: &References,
    schema: &ChannelSchema,
    config: &LabelerConfig,
    seed: u64,
) -> Result<PseudoLabelBatch, LabelerError> {
    if config.k != refs.centroids.len() {
        return Err(LabelerError::RefCountMismatch { refs: refs.centroids.len(), k: config.k });
    }
    let points: Vec<&[f64]> = snapshot.iter().map(|f| f.values()).collect();
    let clusters = kmeans(&points, config.k, seed, config.max_iter, config.tol, config.restarts)?;
    let channels = config.cost_channels(schema)?;
    label_clusters(snapshot, clusters, refs, channels.as_deref())
}
