//! Multi-class gradient-boosted regression trees with a softmax objective,
//! exact greedy split search, learned missing-value directions and
//! best-first (leaf-wise) growth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_classes: usize,
    pub max_depth: usize,
    pub max_leaves: usize,
    pub learning_rate: f64,
    pub n_rounds: usize,
    pub min_child_weight: f64,
    pub lambda_l2: f64,
    /// Minimum loss reduction for a split.
    pub min_split_gain: f64,
    /// Stop after this many rounds without validation macro-AUC improvement.
    pub early_stopping_rounds: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_classes: 15,
            max_depth: 10,
            max_leaves: 10,
            learning_rate: 0.008,
            n_rounds: 200,
            min_child_weight: 1.0,
            lambda_l2: 1.0,
            min_split_gain: 0.0,
            early_stopping_rounds: Some(50),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        missing_left: bool,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }
}

/// A regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { value, cover }],
        }
    }

    /// Index of the child `x` is routed to at split node `n`.
    pub fn route(&self, n: usize, x: &[f64]) -> Option<usize> {
        match self.nodes[n] {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                missing_left,
                ..
            } => {
                let v = x[feature];
                Some(if v.is_nan() {
                    if missing_left {
                        left
                    } else {
                        right
                    }
                } else if v < threshold {
                    left
                } else {
                    right
                })
            }
            TreeNode::Leaf { .. } => None,
        }
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut n = 0;
        while let Some(next) = self.route(n, x) {
            n = next;
        }
        n
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { value, .. } => value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, n: usize) -> usize {
            match t.nodes[n] {
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    /// Features used by any split.
    pub fn features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

pub const MODEL_FORMAT: &str = "ecg-aging-gbdt/1";

/// Per-class additive trees. `rounds[r][k]` is the tree of class `k` in
/// round `r`; leaf values already include the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub format: String,
    pub n_classes: usize,
    pub base_score: Vec<f64>,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub rounds: Vec<Vec<Tree>>,
    pub config: TrainConfig,
    /// Validation macro-AUC after each round, when a validation set was given.
    #[serde(default)]
    pub valid_auc: Vec<f64>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl TreeEnsemble {
    /// Model with no trees and equal base scores.
    pub fn empty(feature_names: Vec<String>, config: TrainConfig) -> Self {
        TreeEnsemble {
            format: MODEL_FORMAT.into(),
            n_classes: config.n_classes,
            base_score: vec![0.0; config.n_classes],
            learning_rate: config.learning_rate,
            feature_names,
            rounds: Vec::new(),
            config,
            valid_auc: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_trees(&self, class: usize) -> impl Iterator<Item = &Tree> {
        self.rounds.iter().map(move |r| &r[class])
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::FeatureLayout(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Checks that `names` match the model's feature order.
    pub fn check_names(&self, names: &[String]) -> Result<()> {
        if names != self.feature_names.as_slice() {
            return Err(Error::FeatureLayout("feature names differ from the model's".into()));
        }
        Ok(())
    }

    /// Raw per-class scores (margins).
    pub fn margin(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        Ok(self.margin_unchecked(x))
    }

    fn margin_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.base_score.clone();
        for round in &self.rounds {
            for (k, tree) in round.iter().enumerate() {
                z[k] += tree.predict(x);
            }
        }
        z
    }

    pub fn class_margin(&self, x: &[f64], class: usize) -> f64 {
        self.base_score[class] + self.class_trees(class).map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.margin(x)?))
    }

    pub fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.par_iter().map(|x| self.predict_proba(x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TreeEnsemble = serde_json::from_str(s)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::invalid(format!("unknown model format {:?}", m.format)));
        }
        if m.base_score.len() != m.n_classes || m.rounds.iter().any(|r| r.len() != m.n_classes) {
            return Err(Error::invalid("every round must hold one tree per class"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Training rows with labels and optional per-row weights. Missing feature
/// values are NaN.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub rows: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub weights: Option<&'a [f64]>,
}

impl<'a> TrainData<'a> {
    pub fn new(rows: &'a [Vec<f64>], labels: &'a [usize]) -> Self {
        TrainData {
            rows,
            labels,
            weights: None,
        }
    }

    pub fn with_weights(self, weights: &'a [f64]) -> Self {
        TrainData {
            weights: Some(weights),
            ..self
        }
    }
}

fn class_counts(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::ClassOutOfRange { class: l, n_classes });
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// Upsamples every class with replacement to the majority count, then
/// shuffles. Original rows are always kept.
pub fn rebalance_oversample(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: rows.len(),
        });
    }
    let counts = class_counts(labels, n_classes)?;
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    for c in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for _ in counts[c]..target {
            idx.push(members[rng.random_range(0..members.len())]);
        }
    }
    idx.shuffle(&mut rng);
    Ok((
        idx.iter().map(|&i| rows[i].clone()).collect(),
        idx.iter().map(|&i| labels[i]).collect(),
    ))
}

/// Per-class weights `N / (C * count)`, the inverse of each class frequency
/// normalized to mean 1 over samples.
pub fn inverse_frequency_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let counts = class_counts(labels, n_classes)?;
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (n_classes as f64 * c as f64)).collect())
}

/// Feature values sorted once for exact split enumeration.
struct SortedColumns {
    order: Vec<Vec<u32>>,
}

impl SortedColumns {
    fn new(rows: &[Vec<f64>], n_features: usize) -> Self {
        let order = (0..n_features)
            .into_par_iter()
            .map(|f| {
                let mut idx: Vec<u32> = (0..rows.len() as u32)
                    .filter(|&i| !rows[i as usize][f].is_nan())
                    .collect();
                idx.sort_by(|&a, &b| rows[a as usize][f].total_cmp(&rows[b as usize][f]).then(a.cmp(&b)));
                idx
            })
            .collect();
        SortedColumns { order }
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    cols: &'a SortedColumns,
    cfg: &'a TrainConfig,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.cfg.lambda_l2)
    }

    fn best_split(
        &self,
        node_of: &[u32],
        node: u32,
        g_tot: f64,
        h_tot: f64,
        grad: &[(f64, f64)],
    ) -> Option<SplitChoice> {
        let parent = self.score(g_tot, h_tot);
        let mcw = self.cfg.min_child_weight;
        let mut best: Option<SplitChoice> = None;
        for (f, order) in self.cols.order.iter().enumerate() {
            let mut present = order.iter().filter(|&&i| node_of[i as usize] == node).peekable();
            let (mut gl, mut hl) = (0.0, 0.0);
            let (g_present, h_present) = order
                .iter()
                .filter(|&&i| node_of[i as usize] == node)
                .fold((0.0, 0.0), |(a, b), &i| {
                    (a + grad[i as usize].0, b + grad[i as usize].1)
                });
            let (gm, hm) = (g_tot - g_present, h_tot - h_present);
            while let Some(&i) = present.next() {
                let (g, h) = grad[i as usize];
                gl += g;
                hl += h;
                let Some(&&j) = present.peek() else { break };
                let (v, w) = (self.rows[i as usize][f], self.rows[j as usize][f]);
                if !(v < w) {
                    continue;
                }
                let mut thr = 0.5 * (v + w);
                if !(v < thr && thr <= w) {
                    thr = w;
                }
                for missing_left in [false, true] {
                    let (l_g, l_h) = if missing_left { (gl + gm, hl + hm) } else { (gl, hl) };
                    let (r_g, r_h) = (g_tot - l_g, h_tot - l_h);
                    if l_h < mcw || r_h < mcw {
                        continue;
                    }
                    let gain = 0.5 * (self.score(l_g, l_h) + self.score(r_g, r_h) - parent);
                    if gain > self.cfg.min_split_gain && best.map_or(true, |b| gain > b.gain) {
                        best = Some(SplitChoice {
                            gain,
                            feature: f,
                            threshold: thr,
                            missing_left,
                        });
                    }
                }
            }
        }
        best
    }

    /// Grows one tree best-first on gradient pairs.
    fn grow(&self, grad: &[(f64, f64)]) -> Tree {
        struct Open {
            node: usize,
            depth: usize,
            g: f64,
            h: f64,
            split: Option<SplitChoice>,
        }
        let n = self.rows.len();
        let mut node_of = vec![0u32; n];
        let (g0, h0) = grad.iter().fold((0.0, 0.0), |(a, b), &(g, h)| (a + g, b + h));
        let mut nodes = vec![TreeNode::Leaf { value: 0.0, cover: h0 }];
        let mut sums = vec![(g0, h0)];
        let mut open = vec![Open {
            node: 0,
            depth: 0,
            g: g0,
            h: h0,
            split: (self.cfg.max_depth > 0)
                .then(|| self.best_split(&node_of, 0, g0, h0, grad))
                .flatten(),
        }];
        let mut n_leaves = 1;
        while n_leaves < self.cfg.max_leaves {
            let pick = open
                .iter()
                .enumerate()
                .filter(|(_, o)| o.split.is_some())
                .max_by(|(_, a), (_, b)| {
                    a.split
                        .unwrap()
                        .gain
                        .total_cmp(&b.split.unwrap().gain)
                        .then(b.node.cmp(&a.node))
                })
                .map(|(i, _)| i);
            let Some(pi) = pick else { break };
            let o = open.swap_remove(pi);
            let s = o.split.unwrap();
            let (l, r) = (nodes.len(), nodes.len() + 1);
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..n {
                if node_of[i] as usize != o.node {
                    continue;
                }
                let v = self.rows[i][s.feature];
                let go_left = if v.is_nan() { s.missing_left } else { v < s.threshold };
                if go_left {
                    node_of[i] = l as u32;
                    gl += grad[i].0;
                    hl += grad[i].1;
                } else {
                    node_of[i] = r as u32;
                }
            }
            let (gr, hr) = (o.g - gl, o.h - hl);
            nodes[o.node] = TreeNode::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: l,
                right: r,
                missing_left: s.missing_left,
                cover: o.h,
            };
            nodes.push(TreeNode::Leaf { value: 0.0, cover: hl });
            nodes.push(TreeNode::Leaf { value: 0.0, cover: hr });
            sums.push((gl, hl));
            sums.push((gr, hr));
            n_leaves += 1;
            let depth = o.depth + 1;
            for (node, g, h) in [(l, gl, hl), (r, gr, hr)] {
                let split = (depth < self.cfg.max_depth)
                    .then(|| self.best_split(&node_of, node as u32, g, h, grad))
                    .flatten();
                open.push(Open {
                    node,
                    depth,
                    g,
                    h,
                    split,
                });
            }
        }
        for (node, &(g, h)) in nodes.iter_mut().zip(&sums) {
            if let TreeNode::Leaf { value, .. } = node {
                *value = -self.cfg.learning_rate * g / (h + self.cfg.lambda_l2);
            }
        }
        Tree { nodes }
    }
}

const MIN_HESSIAN: f64 = 1e-16;

/// Trains a softmax boosted ensemble. With `valid`, training stops once the
/// validation macro-AUC has not improved for `early_stopping_rounds` rounds
/// and the ensemble is cut back to its best round.
pub fn fit(
    feature_names: &[String],
    train: TrainData<'_>,
    cfg: &TrainConfig,
    valid: Option<TrainData<'_>>,
) -> Result<TreeEnsemble> {
    let rows = train.rows;
    let n_f = feature_names.len();
    if rows.len() != train.labels.len() {
        return Err(Error::LengthMismatch {
            expected: train.labels.len(),
            actual: rows.len(),
        });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n_f) {
        return Err(Error::FeatureLayout(format!(
            "row has {} values for {n_f} features",
            r.len()
        )));
    }
    if cfg.n_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let counts = class_counts(train.labels, cfg.n_classes)?;
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateLabels("training labels hold a single class".into()));
    }
    if let Some(f) = (0..n_f).find(|&f| rows.iter().all(|r| r[f].is_nan())) {
        return Err(Error::FeatureLayout(format!(
            "feature {} is missing in every row",
            feature_names[f]
        )));
    }
    let weights: Vec<f64> = match train.weights {
        Some(w) if w.len() == rows.len() => w.to_vec(),
        Some(w) => {
            return Err(Error::LengthMismatch {
                expected: rows.len(),
                actual: w.len(),
            })
        }
        None => vec![1.0; rows.len()],
    };
    let mut model = TreeEnsemble::empty(feature_names.to_vec(), cfg.clone());
    let cols = SortedColumns::new(rows, n_f);
    let grower = Grower { rows, cols: &cols, cfg };
    let mut margins: Vec<Vec<f64>> = vec![model.base_score.clone(); rows.len()];
    let mut valid_margins: Vec<Vec<f64>> = valid
        .map(|v| vec![model.base_score.clone(); v.rows.len()])
        .unwrap_or_default();
    let mut best: Option<(f64, usize)> = None;

    for round in 0..cfg.n_rounds {
        let probs: Vec<Vec<f64>> = margins.iter().map(|z| softmax(z)).collect();
        let trees: Vec<Tree> = (0..cfg.n_classes)
            .into_par_iter()
            .map(|k| {
                let grad: Vec<(f64, f64)> = probs
                    .iter()
                    .zip(train.labels)
                    .zip(&weights)
                    .map(|((p, &y), &w)| {
                        let target = if y == k { 1.0 } else { 0.0 };
                        (w * (p[k] - target), (w * p[k] * (1.0 - p[k])).max(MIN_HESSIAN))
                    })
                    .collect();
                grower.grow(&grad)
            })
            .collect();
        for (z, x) in margins.iter_mut().zip(rows) {
            for (k, t) in trees.iter().enumerate() {
                z[k] += t.predict(x);
            }
        }
        if let Some(v) = valid {
            for (z, x) in valid_margins.iter_mut().zip(v.rows) {
                for (k, t) in trees.iter().enumerate() {
                    z[k] += t.predict(x);
                }
            }
        }
        model.rounds.push(trees);
        if let Some(v) = valid {
            let probs: Vec<Vec<f64>> = valid_margins.iter().map(|z| softmax(z)).collect();
            let Ok(auc) = eval::macro_auc(&probs, v.labels) else {
                continue;
            };
            model.valid_auc.push(auc.macro_auc);
            if best.map_or(true, |(b, _)| auc.macro_auc > b) {
                best = Some((auc.macro_auc, round));
            }
            if let (Some(patience), Some((_, br))) = (cfg.early_stopping_rounds, best) {
                if round - br >= patience {
                    log::info!("early stop at round {round}, best round {br}");
                    break;
                }
            }
        }
        if margins.iter().flatten().any(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("non-finite margin in round {round}")));
        }
    }
    if let (Some(_), Some((_, br))) = (cfg.early_stopping_rounds, best) {
        model.rounds.truncate(br + 1);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub best_index: usize,
    pub best: TrainConfig,
    /// Validation macro-AUC of every config, in input order.
    pub scores: Vec<(TrainConfig, f64)>,
}

/// Fits every config and keeps the one with the highest validation
/// macro-AUC; ties go to the earliest config.
pub fn grid_search(
    configs: &[TrainConfig],
    feature_names: &[String],
    train: TrainData<'_>,
    valid: TrainData<'_>,
) -> Result<GridReport> {
    if configs.is_empty() {
        return Err(Error::invalid("grid search needs at least one config"));
    }
    let mut scores: Vec<(TrainConfig, f64)> = Vec::with_capacity(configs.len());
    let mut best_index = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let model = fit(feature_names, train, cfg, Some(valid))?;
        let probs = model.predict_proba_batch(valid.rows)?;
        let auc = eval::macro_auc(&probs, valid.labels)?.macro_auc;
        if i == 0 || auc > scores[best_index].1 {
            best_index = i;
        }
        scores.push((cfg.clone(), auc));
    }
    Ok(GridReport {
        best_index,
        best: configs[best_index].clone(),
        scores,
    })
}
