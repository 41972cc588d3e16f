//! Exact path-dependent TreeSHAP for [`TreeEnsemble`] class scores.
//!
//! Node covers serve as the background distribution, so no reference data
//! is needed. Attributions explain the raw class margin, not the softmax
//! probability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{Tree, TreeEnsemble, TreeNode};

pub const METHOD: &str = "path_dependent_tree_shap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub class_id: usize,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub model_output: f64,
}

impl ShapExplanation {
    /// `base_value + sum(phi) - model_output`.
    pub fn local_accuracy_gap(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.model_output
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let d = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if d == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..d).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) as f64 / (d + 1) as f64;
        path[i].pweight = zero_fraction * path[i].pweight * (d - i) as f64 / (d + 1) as f64;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let d = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[d].pweight;
    for i in (0..d).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * (d + 1) as f64 / ((i + 1) as f64 * one_fraction);
            next_one = tmp - path[i].pweight * zero_fraction * (d - i) as f64 / (d + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (d + 1) as f64 / (zero_fraction * (d - i) as f64);
        }
    }
    for i in index..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let d = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let mut next_one = path[d].pweight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one_fraction != 0.0 {
            let tmp = next_one * (d + 1) as f64 / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one = path[i].pweight - tmp * zero_fraction * (d - i) as f64 / (d + 1) as f64;
        } else {
            total += path[i].pweight / zero_fraction / ((d - i) as f64 / (d + 1) as f64);
        }
    }
    total
}

fn recurse(
    tree: &Tree,
    node: usize,
    x: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                if let Some(f) = el.feature {
                    phi[f] += w * (el.one_fraction - el.zero_fraction) * value;
                }
            }
        }
        TreeNode::Split {
            feature: split,
            left,
            right,
            cover,
            ..
        } => {
            let hot = tree.route(node, x).expect("split node routes");
            let cold = if hot == left { right } else { left };
            let (mut inc_zero, mut inc_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(split)) {
                inc_zero = path[k].zero_fraction;
                inc_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            let hot_frac = tree.nodes[hot].cover() / cover;
            let cold_frac = tree.nodes[cold].cover() / cover;
            recurse(
                tree,
                hot,
                x,
                phi,
                path.clone(),
                hot_frac * inc_zero,
                inc_one,
                Some(split),
            );
            recurse(tree, cold, x, phi, path, cold_frac * inc_zero, 0.0, Some(split));
        }
    }
}

/// Adds the SHAP values of one tree's output at `x` to `phi`.
pub fn tree_shap(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    recurse(tree, 0, x, phi, Vec::with_capacity(tree.depth() + 2), 1.0, 1.0, None);
}

/// Cover-weighted mean leaf value.
pub fn expected_value(tree: &Tree) -> f64 {
    let root = tree.nodes[0].cover();
    tree.nodes
        .iter()
        .filter_map(|n| match n {
            TreeNode::Leaf { value, cover } => Some(value * cover / root),
            TreeNode::Split { .. } => None,
        })
        .sum()
}

pub fn explain_instance(model: &TreeEnsemble, x: &[f64], class_id: usize) -> Result<ShapExplanation> {
    if class_id >= model.n_classes {
        return Err(Error::ClassOutOfRange {
            class: class_id,
            n_classes: model.n_classes,
        });
    }
    if x.len() != model.n_features() {
        return Err(Error::FeatureLayout(format!(
            "model expects {} features, got {}",
            model.n_features(),
            x.len()
        )));
    }
    let mut phi = vec![0.0; model.n_features()];
    let mut base = model.base_score[class_id];
    for tree in model.class_trees(class_id) {
        tree_shap(tree, x, &mut phi);
        base += expected_value(tree);
    }
    Ok(ShapExplanation {
        class_id,
        phi,
        base_value: base,
        model_output: model.class_margin(x, class_id),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub name: String,
    pub mean_abs_phi: f64,
}

/// Per-sample SHAP values and raw feature values of one feature, for
/// beeswarm-style plots. Missing feature values are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSamples {
    pub name: String,
    pub phi: Vec<f64>,
    pub value: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub class_id: usize,
    pub method: String,
    pub n_samples: usize,
    /// All features by descending mean |phi|, ties by feature index.
    pub ranking: Vec<RankedFeature>,
    pub top: Vec<FeatureSamples>,
}

impl ShapSummary {
    pub fn top_names(&self, k: usize) -> Vec<&str> {
        self.ranking.iter().take(k).map(|r| r.name.as_str()).collect()
    }
}

pub fn summarize_class(model: &TreeEnsemble, rows: &[Vec<f64>], class_id: usize, k: usize) -> Result<ShapSummary> {
    if rows.is_empty() {
        return Err(Error::invalid("SHAP summary of an empty table"));
    }
    let expl = rows
        .par_iter()
        .map(|x| explain_instance(model, x, class_id))
        .collect::<Result<Vec<_>>>()?;
    let n_f = model.n_features();
    let mut ranking: Vec<RankedFeature> = (0..n_f)
        .map(|f| RankedFeature {
            index: f,
            name: model.feature_names[f].clone(),
            mean_abs_phi: expl.iter().map(|e| e.phi[f].abs()).sum::<f64>() / expl.len() as f64,
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then(a.index.cmp(&b.index)));
    let top = ranking
        .iter()
        .take(k.min(n_f))
        .map(|r| FeatureSamples {
            name: r.name.clone(),
            phi: expl.iter().map(|e| e.phi[r.index]).collect(),
            value: rows.iter().map(|x| Some(x[r.index]).filter(|v| !v.is_nan())).collect(),
        })
        .collect();
    Ok(ShapSummary {
        class_id,
        method: METHOD.into(),
        n_samples: rows.len(),
        ranking,
        top,
    })
}
