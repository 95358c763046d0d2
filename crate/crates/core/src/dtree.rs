//! C4.5-style decision tree over continuous channels.
//!
//! Splits are binary (`value <= threshold` goes left) with thresholds at the
//! midpoints between consecutive distinct values, chosen by gain ratio.
//! Optional pruning uses C4.5's pessimistic (upper confidence bound) error
//! estimate with subtree replacement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{SchemaError, TreeError};
use crate::types::{ChannelId, ChannelSchema, Dataset, LabeledSample, SensorFrame, TaskLabel};

pub type ClassCounts = [usize; TaskLabel::COUNT];

/// Gain ratios closer than this count as tied.
const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_leaf_size: usize,
    /// `None` grows until another stopping rule applies.
    pub max_depth: Option<usize>,
    pub prune: bool,
    pub confidence: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { min_leaf_size: 2, max_depth: None, prune: false, confidence: 0.25 }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.min_leaf_size == 0 {
            return Err(TreeError::InvalidParams("min_leaf_size must be >= 1"));
        }
        if self.max_depth == Some(0) {
            return Err(TreeError::InvalidParams("max_depth must be >= 1"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(TreeError::InvalidParams("confidence must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        channel: usize,
        threshold: f64,
        counts: ClassCounts,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        label: TaskLabel,
        counts: ClassCounts,
    },
}

impl Node {
    pub fn leaf(counts: ClassCounts) -> Node {
        Node::Leaf { label: majority(&counts), counts }
    }

    pub fn counts(&self) -> &ClassCounts {
        match self {
            Node::Split { counts, .. } | Node::Leaf { counts, .. } => counts,
        }
    }

    fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Argmax of the counts; ties go to the label declared first.
pub fn majority(counts: &ClassCounts) -> TaskLabel {
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    TaskLabel::from_index(best).expect("index within label set")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub schema: ChannelSchema,
    pub params: TreeParams,
    pub trained_on: usize,
    pub root: Node,
}

/// Entropy in bits of a class distribution.
pub fn entropy(counts: &[usize]) -> Result<f64, TreeError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TreeError::EmptyCounts);
    }
    Ok(entropy_of(counts, total))
}

fn entropy_of(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub threshold: f64,
    pub gain: f64,
    pub gain_ratio: f64,
    pub left_size: usize,
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    // Adjacent floats: keep `lo` on the left side.
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Best gain-ratio threshold over `(value, label)` pairs sorted by value.
/// Candidates leaving fewer than `min_leaf` samples on a side are skipped.
fn best_split_sorted(sorted: &[(f64, TaskLabel)], min_leaf: usize) -> Option<SplitCandidate> {
    let n = sorted.len();
    if n < 2 {
        return None;
    }
    let mut total = [0usize; TaskLabel::COUNT];
    for &(_, l) in sorted {
        total[l.index()] += 1;
    }
    let parent = entropy_of(&total, n);
    let nf = n as f64;
    let mut left = [0usize; TaskLabel::COUNT];
    let mut best: Option<SplitCandidate> = None;
    for i in 0..n - 1 {
        left[sorted[i].1.index()] += 1;
        if sorted[i].0 == sorted[i + 1].0 {
            continue;
        }
        let nl = i + 1;
        let nr = n - nl;
        if nl < min_leaf || nr < min_leaf {
            continue;
        }
        let mut right = total;
        for k in 0..TaskLabel::COUNT {
            right[k] -= left[k];
        }
        let (pl, pr) = (nl as f64 / nf, nr as f64 / nf);
        let gain = (parent - pl * entropy_of(&left, nl) - pr * entropy_of(&right, nr)).max(0.0);
        let split_info = -pl * pl.log2() - pr * pr.log2();
        let ratio = gain / split_info;
        if best.is_none_or(|b| ratio > b.gain_ratio + RATIO_EPS) {
            best = Some(SplitCandidate {
                threshold: midpoint(sorted[i].0, sorted[i + 1].0),
                gain,
                gain_ratio: ratio,
                left_size: nl,
            });
        }
    }
    best
}

/// Best threshold on one channel by gain ratio; `None` when every sample
/// carries the same value.
pub fn best_split(samples: &[LabeledSample], channel: usize) -> Option<SplitCandidate> {
    let mut pairs: Vec<(f64, TaskLabel)> = samples.iter().map(|s| (s.frame.value(channel), s.label)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    best_split_sorted(&pairs, 1)
}

struct Builder<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<TaskLabel>,
    params: TreeParams,
    n_channels: usize,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> ClassCounts {
        let mut c = [0; TaskLabel::COUNT];
        for &i in idx {
            c[self.labels[i].index()] += 1;
        }
        c
    }

    /// `orders[ch]` lists the node's samples sorted by channel `ch`; sorting
    /// once up front and partitioning keeps every level linear.
    fn grow(&self, orders: Vec<Vec<usize>>, depth: usize, goes_left: &mut [bool]) -> Node {
        let counts = self.counts(&orders[0]);
        let n = orders[0].len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_done = self.params.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_done || n < 2 * self.params.min_leaf_size {
            return Node::leaf(counts);
        }

        let mut best: Option<(usize, SplitCandidate)> = None;
        let mut pairs = Vec::with_capacity(n);
        for (ch, order) in orders.iter().enumerate() {
            pairs.clear();
            pairs.extend(order.iter().map(|&i| (self.rows[i][ch], self.labels[i])));
            if let Some(c) = best_split_sorted(&pairs, self.params.min_leaf_size) {
                if best.is_none_or(|(_, b)| c.gain_ratio > b.gain_ratio + RATIO_EPS) {
                    best = Some((ch, c));
                }
            }
        }
        drop(pairs);
        let Some((channel, cand)) = best else {
            return Node::leaf(counts);
        };
        for &i in &orders[0] {
            goes_left[i] = self.rows[i][channel] <= cand.threshold;
        }
        let mut left = Vec::with_capacity(orders.len());
        let mut right = Vec::with_capacity(orders.len());
        for order in orders {
            let (l, r): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| goes_left[i]);
            left.push(l);
            right.push(r);
        }
        Node::Split {
            channel,
            threshold: cand.threshold,
            counts,
            left: Box::new(self.grow(left, depth + 1, goes_left)),
            right: Box::new(self.grow(right, depth + 1, goes_left)),
        }
    }
}

/// Extra errors predicted by C4.5's pessimistic estimate for a leaf holding
/// `n` samples of which `e` are misclassified. `coeff` is the squared normal
/// deviate for the pruning confidence.
fn add_errs(n: f64, e: f64, cf: f64, coeff: f64) -> f64 {
    if e < 1e-6 {
        n * (1.0 - (cf.ln() / n).exp())
    } else if e < 0.9999 {
        let v0 = n * (1.0 - (cf.ln() / n).exp());
        v0 + e * (add_errs(n, 1.0, cf, coeff) - v0)
    } else if e + 0.5 >= n {
        0.67 * (n - e)
    } else {
        let pr = (e + 0.5 + coeff / 2.0 + (coeff * ((e + 0.5) * (1.0 - (e + 0.5) / n) + coeff / 4.0)).sqrt())
            / (n + coeff);
        n * pr - e
    }
}

fn leaf_error(counts: &ClassCounts) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let e = n - counts[majority(counts).index()];
    (n as f64, e as f64)
}

/// Returns the estimated error of the (possibly pruned) subtree.
fn prune_node(node: &mut Node, cf: f64, coeff: f64) -> f64 {
    let (n, e) = leaf_error(node.counts());
    let as_leaf = if n > 0.0 { e + add_errs(n, e, cf, coeff) } else { 0.0 };
    match node {
        Node::Leaf { .. } => as_leaf,
        Node::Split { left, right, counts, .. } => {
            let subtree = prune_node(left, cf, coeff) + prune_node(right, cf, coeff);
            if as_leaf <= subtree + 0.1 {
                *node = Node::leaf(*counts);
                as_leaf
            } else {
                subtree
            }
        }
    }
}

impl DecisionTree {
    pub fn train(ds: &Dataset, params: TreeParams) -> Result<Self, TreeError> {
        let samples: Vec<&LabeledSample> = ds.samples().collect();
        Self::train_on(ds.schema(), &samples, params)
    }

    pub fn train_on(schema: &ChannelSchema, samples: &[&LabeledSample], params: TreeParams) -> Result<Self, TreeError> {
        params.validate()?;
        if samples.is_empty() {
            return Err(TreeError::EmptyDataset);
        }
        let builder = Builder {
            rows: samples.iter().map(|s| s.frame.values()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            params,
            n_channels: schema.len(),
        };
        if builder.rows.iter().any(|r| r.len() != schema.len()) {
            return Err(SchemaError::SchemaMismatch {
                expected: schema.len(),
                actual: builder.rows.iter().map(|r| r.len()).find(|&l| l != schema.len()).unwrap_or(0),
            }
            .into());
        }
        let orders = (0..builder.n_channels)
            .map(|ch| {
                let mut o: Vec<usize> = (0..samples.len()).collect();
                o.sort_by(|&a, &b| builder.rows[a][ch].total_cmp(&builder.rows[b][ch]));
                o
            })
            .collect();
        let mut goes_left = vec![false; samples.len()];
        let mut root = builder.grow(orders, 0, &mut goes_left);
        if params.prune {
            let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - params.confidence);
            prune_node(&mut root, params.confidence, z * z);
        }
        Ok(DecisionTree { schema: schema.clone(), params, trained_on: samples.len(), root })
    }

    /// Descends on raw channel values in schema order.
    pub fn predict_values(&self, values: &[f64]) -> TaskLabel {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { label, .. } => return *label,
                Node::Split { channel, threshold, left, right, .. } => {
                    node = if values[*channel] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, frame: &SensorFrame) -> Result<TaskLabel, SchemaError> {
        if frame.values().len() != self.schema.len() {
            return Err(SchemaError::SchemaMismatch {
                expected: self.schema.len(),
                actual: frame.values().len(),
            });
        }
        Ok(self.predict_values(frame.values()))
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaves()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Marks every channel tested along the path taken by `values`.
    fn tested_channels(&self, values: &[f64], seen: &mut [bool]) {
        let mut node = &self.root;
        while let Node::Split { channel, threshold, left, right, .. } = node {
            seen[*channel] = true;
            node = if values[*channel] <= *threshold { left } else { right };
        }
    }

    /// Fraction of samples whose root-to-leaf path tests each channel, sorted
    /// by rate descending (schema order among equal rates).
    pub fn attribute_contribution<'a, I>(&self, samples: I) -> Vec<(ChannelId, f64)>
    where
        I: IntoIterator<Item = &'a LabeledSample>,
    {
        let d = self.schema.len();
        let mut hits = vec![0usize; d];
        let mut n = 0usize;
        let mut seen = vec![false; d];
        for s in samples {
            seen.iter_mut().for_each(|b| *b = false);
            self.tested_channels(s.frame.values(), &mut seen);
            for (h, &b) in hits.iter_mut().zip(&seen) {
                *h += b as usize;
            }
            n += 1;
        }
        let mut out: Vec<(usize, f64)> = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| (i, if n == 0 { 0.0 } else { h as f64 / n as f64 }))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.into_iter().map(|(i, r)| (self.schema.channel(i).clone(), r)).collect()
    }

    pub fn evaluate<'a, I>(&self, samples: I) -> Result<EvalMetrics, TreeError>
    where
        I: IntoIterator<Item = &'a LabeledSample>,
    {
        let mut confusion = [[0usize; TaskLabel::COUNT]; TaskLabel::COUNT];
        let mut elapsed = 0.0;
        let mut n = 0usize;
        for s in samples {
            let start = Instant::now();
            let predicted = self.predict(&s.frame)?;
            elapsed += start.elapsed().as_secs_f64();
            confusion[s.label.index()][predicted.index()] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(TreeError::EmptyDataset);
        }
        let correct: usize = (0..TaskLabel::COUNT).map(|i| confusion[i][i]).sum();
        Ok(EvalMetrics {
            accuracy: correct as f64 / n as f64,
            confusion,
            mean_predict_latency: elapsed / n as f64,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeDoc::from_tree(self)).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let doc: TreeDoc = serde_json::from_str(text).map_err(|e| TreeError::Model(e.to_string()))?;
        doc.into_tree()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Rows are true labels, columns predicted labels.
    pub confusion: [[usize; TaskLabel::COUNT]; TaskLabel::COUNT],
    /// Seconds per prediction.
    pub mean_predict_latency: f64,
}

/// Seeded shuffle followed by a train/holdout split.
pub fn split_holdout(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), TreeError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TreeError::InvalidFraction(train_fraction));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(TreeError::DatasetTooSmall(n));
    }
    let all = ds.to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| all[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| all[i].clone()).collect();
    Ok((
        Dataset::from_samples(ds.schema().clone(), train),
        Dataset::from_samples(ds.schema().clone(), test),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Split { channel: String, threshold: f64, left: Box<NodeDoc>, right: Box<NodeDoc> },
    Leaf { label: TaskLabel, counts: ClassCounts },
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeDoc {
    format: String,
    schema: ChannelSchema,
    params: TreeParams,
    trained_on: usize,
    root: NodeDoc,
}

const TREE_FORMAT: &str = "handtask-tree/1";

impl TreeDoc {
    fn from_tree(t: &DecisionTree) -> Self {
        fn node(n: &Node, schema: &ChannelSchema) -> NodeDoc {
            match n {
                Node::Leaf { label, counts } => NodeDoc::Leaf { label: *label, counts: *counts },
                Node::Split { channel, threshold, left, right, .. } => NodeDoc::Split {
                    channel: schema.channel(*channel).to_string(),
                    threshold: *threshold,
                    left: Box::new(node(left, schema)),
                    right: Box::new(node(right, schema)),
                },
            }
        }
        TreeDoc {
            format: TREE_FORMAT.into(),
            schema: t.schema.clone(),
            params: t.params,
            trained_on: t.trained_on,
            root: node(&t.root, &t.schema),
        }
    }

    fn into_tree(self) -> Result<DecisionTree, TreeError> {
        if self.format != TREE_FORMAT {
            return Err(TreeError::Model(format!("unsupported format {:?}", self.format)));
        }
        fn node(d: NodeDoc, schema: &ChannelSchema) -> Result<Node, TreeError> {
            match d {
                NodeDoc::Leaf { label, counts } => Ok(Node::Leaf { label, counts }),
                NodeDoc::Split { channel, threshold, left, right } => {
                    let idx = schema
                        .index_of(&channel)
                        .ok_or_else(|| TreeError::Model(format!("split on unknown channel {channel}")))?;
                    let left = node(*left, schema)?;
                    let right = node(*right, schema)?;
                    let mut counts = *left.counts();
                    for (c, r) in counts.iter_mut().zip(right.counts()) {
                        *c += r;
                    }
                    Ok(Node::Split {
                        channel: idx,
                        threshold,
                        counts,
                        left: Box::new(left),
                        right: Box::new(right),
                    })
                }
            }
        }
        let root = node(self.root, &self.schema)?;
        Ok(DecisionTree { schema: self.schema, params: self.params, trained_on: self.trained_on, root })
    }
}
