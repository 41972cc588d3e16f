//! Subject-level stratified splits, AUC metrics, bootstrap intervals and
//! age-group consolidation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Record id to split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment(pub BTreeMap<String, Split>);

impl SplitAssignment {
    /// Ids of one split in sorted order.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`, then topped
/// up so every part gets at least one item (taken from the largest part).
pub fn split_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(n - assigned) {
        counts[k] += 1;
    }
    for k in 0..counts.len() {
        if counts[k] == 0 {
            let donor = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[k] = 1;
            }
        }
    }
    counts
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Per-group proportional split. Ids are sorted before a seeded shuffle, so
/// the result does not depend on input order.
pub fn stratified_split(
    labels: &BTreeMap<String, usize>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    if [ratios.0, ratios.1, ratios.2].iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    let mut by_group: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, g) in labels {
        by_group.entry(*g).or_default().push(id);
    }
    let mut out = BTreeMap::new();
    for (g, mut ids) in by_group {
        if ids.len() < 3 {
            return Err(Error::DegenerateLabels(format!(
                "group {g} has {} subjects, splitting needs 3",
                ids.len()
            )));
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(g as u64);
        ids.shuffle(&mut rng);
        let c = split_counts(ids.len(), &[ratios.0, ratios.1, ratios.2]);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < c[0] {
                Split::Train
            } else if i < c[0] + c[1] {
                Split::Valid
            } else {
                Split::Test
            };
            out.insert(id.clone(), s);
        }
    }
    Ok(SplitAssignment(out))
}

/// One-vs-rest AUC by the Mann-Whitney statistic with midranks. `None` if
/// either class is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let k = scores.first().map(Vec::len).unwrap_or(0);
    if scores.iter().any(|s| s.len() != k) {
        return Err(Error::invalid("score rows differ in length"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            n_classes: k,
        });
    }
    Ok(k)
}

fn per_class_auc(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_binary(&s, &pos)
        })
        .collect()
}

/// Per-class one-vs-rest AUC and their unweighted mean over scorable classes.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<AucReport> {
    let k = check_scores(scores, labels)?;
    let per_class = per_class_auc(scores, labels, k);
    let avail: Vec<f64> = per_class.iter().flatten().copied().collect();
    if avail.is_empty() {
        return Err(Error::NoScorableClass);
    }
    let skipped = k - avail.len();
    if skipped > 0 {
        log::warn!("{skipped} of {k} classes lack positives or negatives and are left out of the macro AUC");
    }
    Ok(AucReport {
        macro_auc: avail.iter().sum::<f64>() / avail.len() as f64,
        per_class,
    })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_scores(scores, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(scores: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let k = check_scores(scores, labels)?;
    let mut m = vec![vec![0; k]; k];
    for (s, &l) in scores.iter().zip(labels) {
        m[l][argmax(s)] += 1;
    }
    Ok(m)
}

/// Map from fine classes to coarse groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMapping {
    pub map: Vec<usize>,
    pub n_groups: usize,
}

impl GroupMapping {
    pub fn new(map: Vec<usize>, n_groups: usize) -> Result<Self> {
        if let Some(&g) = map.iter().find(|&&g| g >= n_groups) {
            return Err(Error::invalid(format!("mapping target {g} outside 0..{n_groups}")));
        }
        for g in 0..n_groups {
            if !map.contains(&g) {
                return Err(Error::invalid(format!("mapping leaves group {g} empty")));
            }
        }
        Ok(GroupMapping { map, n_groups })
    }

    /// 18-34, 35-49, 50-64 and 65-92 years over the 15 age groups.
    pub fn default_four() -> Self {
        GroupMapping {
            map: vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3],
            n_groups: 4,
        }
    }

    /// Parses a comma-separated list of target groups, one per class.
    pub fn parse(s: &str) -> Result<Self> {
        let map = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad mapping entry {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = map.iter().max().map(|m| m + 1).unwrap_or(0);
        Self::new(map, n)
    }

    pub fn scores(&self, scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        scores
            .iter()
            .map(|row| {
                if row.len() != self.map.len() {
                    return Err(Error::invalid(format!(
                        "mapping covers {} classes, scores have {}",
                        self.map.len(),
                        row.len()
                    )));
                }
                let mut out = vec![0.0; self.n_groups];
                for (p, &g) in row.iter().zip(&self.map) {
                    out[g] += p;
                }
                Ok(out)
            })
            .collect()
    }

    pub fn labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.map.get(l).copied().ok_or(Error::ClassOutOfRange {
                    class: l,
                    n_classes: self.map.len(),
                })
            })
            .collect()
    }
}

/// Accuracy after summing class probabilities within consolidated groups.
pub fn consolidate_accuracy(scores: &[Vec<f64>], labels: &[usize], mapping: &GroupMapping) -> Result<f64> {
    accuracy(&mapping.scores(scores)?, &mapping.labels(labels)?)
}

/// Numpy-style linear-interpolation percentile of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A point estimate with its 95 % bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2}, {:.2})", self.point, self.lo, self.hi)
    }
}

pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Redraws allowed per iteration when a resample leaves the metric undefined.
pub const MAX_REDRAWS: usize = 100;

/// 2.5/97.5 percentile interval of `metric` over `n` record-level resamples.
/// Iteration `i` draws from its own generator stream, so the result does not
/// depend on scheduling.
pub fn bootstrap_ci<F>(metric: F, scores: &[Vec<f64>], labels: &[usize], n: usize, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[Vec<f64>], &[usize]) -> Option<f64> + Sync,
{
    if n < 100 {
        return Err(Error::invalid(format!("{n} bootstrap iterations, need at least 100")));
    }
    check_scores(scores, labels)?;
    let m = labels.len();
    if m == 0 {
        return Err(Error::invalid("bootstrap of an empty set"));
    }
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut s = Vec::with_capacity(m);
            let mut l = Vec::with_capacity(m);
            for _ in 0..=MAX_REDRAWS {
                s.clear();
                l.clear();
                for _ in 0..m {
                    let k = rng.random_range(0..m);
                    s.push(scores[k].clone());
                    l.push(labels[k]);
                }
                if let Some(v) = metric(&s, &l) {
                    return Ok(v);
                }
            }
            Err(Error::RetryCapExceeded(MAX_REDRAWS))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    Ok((percentile_sorted(&sorted, 2.5), percentile_sorted(&sorted, 97.5)))
}

/// Macro AUC over a fixed class set: undefined if any listed class cannot be
/// scored in this sample.
pub fn macro_auc_fixed(scores: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Option<f64> {
    let k = scores.first()?.len();
    let per = per_class_auc(scores, labels, k);
    let mut sum = 0.0;
    for &c in classes {
        sum += per[c]?;
    }
    (!classes.is_empty()).then(|| sum / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_classes: usize,
    pub n_samples: usize,
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: Interval,
    pub accuracy: Interval,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consolidated_accuracy: Option<Interval>,
    pub confusion: Vec<Vec<usize>>,
    pub n_bootstrap: usize,
    pub seed: u64,
}

pub fn metric_report(
    scores: &[Vec<f64>],
    labels: &[usize],
    n_bootstrap: usize,
    seed: u64,
    mapping: Option<&GroupMapping>,
) -> Result<MetricReport> {
    let auc = macro_auc(scores, labels)?;
    let classes: Vec<usize> = (0..auc.per_class.len())
        .filter(|&c| auc.per_class[c].is_some())
        .collect();
    let (lo, hi) = bootstrap_ci(
        |s, l| macro_auc_fixed(s, l, &classes),
        scores,
        labels,
        n_bootstrap,
        seed,
    )?;
    let macro_auc = Interval {
        point: auc.macro_auc,
        lo,
        hi,
    };
    let acc = accuracy(scores, labels)?;
    let (lo, hi) = bootstrap_ci(|s, l| accuracy(s, l).ok(), scores, labels, n_bootstrap, seed)?;
    let consolidated_accuracy = match mapping {
        Some(m) => {
            let point = consolidate_accuracy(scores, labels, m)?;
            let (lo, hi) = bootstrap_ci(
                |s, l| consolidate_accuracy(s, l, m).ok(),
                scores,
                labels,
                n_bootstrap,
                seed,
            )?;
            Some(Interval { point, lo, hi })
        }
        None => None,
    };
    Ok(MetricReport {
        n_classes: auc.per_class.len(),
        n_samples: labels.len(),
        per_class_auc: auc.per_class,
        macro_auc,
        accuracy: Interval { point: acc, lo, hi },
        consolidated_accuracy,
        confusion: confusion_matrix(scores, labels)?,
        n_bootstrap,
        seed,
    })
}

impl MetricReport {
    /// Plain-text table in "point (lo, hi)" form.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "metric                 value\nmacro_auc              {}\naccuracy               {}\n",
            self.macro_auc, self.accuracy
        );
        if let Some(c) = &self.consolidated_accuracy {
            s.push_str(&format!("consolidated_accuracy  {c}\n"));
        }
        for (c, a) in self.per_class_auc.iter().enumerate() {
            match a {
                Some(a) => s.push_str(&format!("auc_class_{c:02}           {a:.2}\n")),
                None => s.push_str(&format!("auc_class_{c:02}           n/a\n")),
            }
        }
        s
    }
}
