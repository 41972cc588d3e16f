//! Beat-aligned aggregation of attribution maps into group mean heartbeats,
//! top-k salient timesteps, and their distribution over ECG segments.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::beatdetect::{self, Beat, BeatWindow, DelineationConfig};
use crate::error::{Error, Result};

/// Signal and attribution sliced around one R-peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatPair {
    pub signal: Vec<f64>,
    pub attribution: Vec<f64>,
}

/// Cuts identical windows around every R-peak from a crop and its
/// attribution; beats whose window leaves the crop are dropped.
pub fn align_beats(
    signal: &[f64],
    attribution: &[f64],
    rpeaks: &[usize],
    fs: f64,
    window: BeatWindow,
) -> Result<Vec<BeatPair>> {
    if signal.len() != attribution.len() {
        return Err(Error::LengthMismatch {
            expected: signal.len(),
            actual: attribution.len(),
        });
    }
    let s = beatdetect::segment_signal(signal, fs, rpeaks, window)?;
    let a = beatdetect::segment_signal(attribution, fs, rpeaks, window)?;
    Ok(s.rows
        .into_iter()
        .zip(a.rows)
        .map(|(signal, attribution)| BeatPair { signal, attribution })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Mean within each subject, then across subjects.
    #[default]
    PerSubject,
    /// Flat mean over all beats.
    PerBeat,
}

/// All aligned beats of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBeats {
    pub subject: String,
    pub pairs: Vec<BeatPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedBeat {
    pub group: usize,
    pub window: BeatWindow,
    pub fs: f64,
    pub weighting: Weighting,
    pub mean_signal: Vec<f64>,
    pub mean_attribution: Vec<f64>,
    pub n_subjects: usize,
    pub n_heartbeats: usize,
    pub topk_indices: Vec<usize>,
}

impl AggregatedBeat {
    /// Index of the R-peak in the aggregated arrays.
    pub fn r_index(&self) -> usize {
        self.window.samples(self.fs).0
    }

    /// Time of array index `i` relative to the R-peak, in ms.
    pub fn time_ms(&self, i: usize) -> f64 {
        (i as f64 - self.r_index() as f64) * 1000.0 / self.fs
    }
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut n = 0;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Group mean beat and attribution. Subjects are reduced in id order.
pub fn aggregate_group(
    group: usize,
    subjects: &[SubjectBeats],
    fs: f64,
    window: BeatWindow,
    weighting: Weighting,
    k: usize,
) -> Result<AggregatedBeat> {
    let len = window.len(fs);
    let mut subs: Vec<&SubjectBeats> = subjects.iter().filter(|s| !s.pairs.is_empty()).collect();
    if subs.is_empty() {
        return Err(Error::NoBeatFits);
    }
    subs.sort_by(|a, b| a.subject.cmp(&b.subject));
    for p in subs.iter().flat_map(|s| &s.pairs) {
        if p.signal.len() != len || p.attribution.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: p.signal.len().max(p.attribution.len()),
            });
        }
    }
    let n_heartbeats = subs.iter().map(|s| s.pairs.len()).sum();
    let (mean_signal, mean_attribution) = match weighting {
        Weighting::PerSubject => {
            let sig: Vec<Vec<f64>> = subs
                .iter()
                .map(|s| mean_rows(s.pairs.iter().map(|p| p.signal.as_slice()), len))
                .collect();
            let att: Vec<Vec<f64>> = subs
                .iter()
                .map(|s| mean_rows(s.pairs.iter().map(|p| p.attribution.as_slice()), len))
                .collect();
            (
                mean_rows(sig.iter().map(Vec::as_slice), len),
                mean_rows(att.iter().map(Vec::as_slice), len),
            )
        }
        Weighting::PerBeat => (
            mean_rows(subs.iter().flat_map(|s| &s.pairs).map(|p| p.signal.as_slice()), len),
            mean_rows(
                subs.iter().flat_map(|s| &s.pairs).map(|p| p.attribution.as_slice()),
                len,
            ),
        ),
    };
    let topk_indices = mark_topk(&mean_attribution, k)?;
    Ok(AggregatedBeat {
        group,
        window,
        fs,
        weighting,
        mean_signal,
        mean_attribution,
        n_subjects: subs.len(),
        n_heartbeats,
        topk_indices,
    })
}

/// Indices of the `k` largest values in descending order, earlier index
/// first on ties.
pub fn mark_topk(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds window length {}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    #[serde(rename = "P-onset")]
    POnset,
    #[serde(rename = "P-offset")]
    POffset,
    Q,
    R,
    S,
    T,
    TP,
    #[serde(rename = "other")]
    Other,
}

impl Segment {
    pub const ALL: [Segment; 8] = [
        Segment::POnset,
        Segment::POffset,
        Segment::Q,
        Segment::R,
        Segment::S,
        Segment::T,
        Segment::TP,
        Segment::Other,
    ];
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::POnset => "P-onset",
            Segment::POffset => "P-offset",
            Segment::Q => "Q",
            Segment::R => "R",
            Segment::S => "S",
            Segment::T => "T",
            Segment::TP => "TP",
            Segment::Other => "other",
        })
    }
}

/// Assignment tolerance around a landmark.
pub const SEGMENT_TOLERANCE_MS: f64 = 20.0;

/// Landmarks of a delineated mean beat that salient indices are matched to.
fn landmarks(b: &Beat) -> Vec<(Segment, usize)> {
    [
        (Segment::POnset, b.p_on),
        (Segment::POffset, b.p_off),
        (Segment::Q, b.q),
        (Segment::R, Some(b.r)),
        (Segment::S, b.s),
        (Segment::T, b.t_peak),
        (Segment::T, b.t_off),
    ]
    .into_iter()
    .filter_map(|(s, i)| Some((s, i?)))
    .collect()
}

/// Segment of index `i`: nearest landmark within the tolerance, else TP if
/// before the P onset or after the T offset, else other.
pub fn assign_segment(beat: &Beat, len: usize, fs: f64, i: usize) -> Segment {
    let tol = SEGMENT_TOLERANCE_MS * fs / 1000.0;
    let nearest = landmarks(beat)
        .into_iter()
        .map(|(s, at)| (s, (i as f64 - at as f64).abs()))
        .filter(|(_, d)| *d <= tol)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((s, _)) = nearest {
        return s;
    }
    match (beat.p_on, beat.t_off) {
        (Some(p), Some(t)) if i < p || (i > t && i < len) => Segment::TP,
        _ => Segment::Other,
    }
}

/// Delineates an aggregated mean beat around its central R-peak.
pub fn delineate_aggregated(agg: &AggregatedBeat) -> Beat {
    beatdetect::delineate_beat(
        &agg.mean_signal,
        agg.fs,
        agg.r_index(),
        None,
        None,
        &DelineationConfig::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub counts: BTreeMap<Segment, usize>,
    pub percentages: BTreeMap<Segment, f64>,
    pub total: usize,
}

impl SegmentStats {
    pub fn percentage(&self, s: Segment) -> f64 {
        self.percentages.get(&s).copied().unwrap_or(0.0)
    }
}

/// Distribution of every group's top-k indices over segments of that
/// group's delineated mean beat.
pub fn segment_stats(groups: &[AggregatedBeat]) -> SegmentStats {
    let mut counts: BTreeMap<Segment, usize> = Segment::ALL.iter().map(|s| (*s, 0)).collect();
    for agg in groups {
        let beat = delineate_aggregated(agg);
        for &i in &agg.topk_indices {
            *counts
                .get_mut(&assign_segment(&beat, agg.mean_signal.len(), agg.fs, i))
                .unwrap() += 1;
        }
    }
    let total: usize = counts.values().sum();
    let percentages = counts
        .iter()
        .map(|(s, c)| {
            (
                *s,
                if total > 0 {
                    100.0 * *c as f64 / total as f64
                } else {
                    0.0
                },
            )
        })
        .collect();
    SegmentStats {
        counts,
        percentages,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{synth_record, SynthParams};
    use proptest::prelude::*;

    const FS: f64 = 100.0;

    fn window() -> BeatWindow {
        BeatWindow::default()
    }

    fn pair(v: f64, len: usize) -> BeatPair {
        BeatPair {
            signal: vec![v; len],
            attribution: (0..len).map(|i| v * i as f64).collect(),
        }
    }

    #[test]
    fn align_counts_and_matches_segmentation() {
        let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.1).sin()).collect();
        let a: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let pairs = align_beats(&x, &a, &[100, 200, 300], FS, window()).unwrap();
        assert_eq!(pairs.len(), 3);
        let seg = beatdetect::segment_signal(&x, FS, &[100, 200, 300], window()).unwrap();
        for (p, r) in pairs.iter().zip(&seg.rows) {
            assert_eq!(&p.signal, r);
        }
        assert_eq!(
            align_beats(&x, &a, &[10, 380], FS, window()).unwrap_err().to_string(),
            Error::NoBeatFits.to_string()
        );
    }

    #[test]
    fn aggregation_rules() {
        let len = window().len(FS);
        let one = SubjectBeats {
            subject: "a".into(),
            pairs: vec![pair(1.0, len), pair(1.0, len)],
        };
        let agg = aggregate_group(0, &[one.clone()], FS, window(), Weighting::PerSubject, 8).unwrap();
        assert_eq!(agg.mean_signal, vec![1.0; len]);
        assert_eq!((agg.n_subjects, agg.n_heartbeats), (1, 2));

        let two = SubjectBeats {
            subject: "b".into(),
            pairs: vec![pair(3.0, len)],
        };
        let subj = aggregate_group(0, &[one.clone(), two.clone()], FS, window(), Weighting::PerSubject, 8).unwrap();
        assert_eq!(subj.mean_signal[0], 2.0);
        let beat = aggregate_group(0, &[one, two], FS, window(), Weighting::PerBeat, 8).unwrap();
        assert!((beat.mean_signal[0] - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(beat.topk_indices.len(), 8);
    }

    #[test]
    fn topk_rules() {
        let dec: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert_eq!(mark_topk(&dec, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(mark_topk(&[1.0; 20], 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(mark_topk(&[1.0; 4], 8).is_err());
    }

    fn clean_mean_beat() -> AggregatedBeat {
        let p = SynthParams {
            fs: 100,
            sdnn_target: 0.0,
            respiration_depth: 0.0,
            duration: 20.0,
            ..SynthParams::default()
        };
        let (rec, gt) = synth_record("a", &p).unwrap();
        let pairs = align_beats(&rec.samples, &vec![0.0; rec.samples.len()], &gt.r_times, FS, window()).unwrap();
        aggregate_group(
            0,
            &[SubjectBeats {
                subject: "a".into(),
                pairs,
            }],
            FS,
            window(),
            Weighting::PerSubject,
            8,
        )
        .unwrap()
    }

    #[test]
    fn zero_variability_mean_is_a_single_beat() {
        let p = SynthParams {
            fs: 100,
            sdnn_target: 0.0,
            respiration_depth: 0.0,
            duration: 20.0,
            ..SynthParams::default()
        };
        let (rec, gt) = synth_record("a", &p).unwrap();
        let pairs = align_beats(&rec.samples, &rec.samples, &gt.r_times, FS, window()).unwrap();
        let agg = clean_mean_beat();
        for (a, b) in agg.mean_signal.iter().zip(&pairs[1].signal) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_assignment() {
        let mut agg = clean_mean_beat();
        let beat = delineate_aggregated(&agg);
        let p_off = beat.p_off.expect("P offset found");
        agg.topk_indices = vec![p_off; 8];
        let s = segment_stats(&[agg.clone()]);
        assert_eq!(s.percentage(Segment::POffset), 100.0);
        agg.topk_indices = vec![0, 77, beat.r, beat.r + 1, p_off, 78, 79, 80];
        let s = segment_stats(&[agg]);
        let total: f64 = s.percentages.values().sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert_eq!(s.counts[&Segment::TP], 5);
        assert_eq!(s.counts[&Segment::R], 2);
    }

    proptest! {
        #[test]
        fn aggregation_permutation_and_scale(
            vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..4), 1..5),
            c in 0.1f64..10.0,
            rot in 0usize..5,
        ) {
            let len = window().len(FS);
            let subjects: Vec<SubjectBeats> = vals
                .iter()
                .enumerate()
                .map(|(i, vs)| SubjectBeats {
                    subject: format!("s{i}"),
                    pairs: vs
                        .iter()
                        .map(|v| BeatPair {
                            signal: vec![*v; len],
                            attribution: (0..len).map(|t| ((t as f64 * v * 13.0).sin()).abs()).collect(),
                        })
                        .collect(),
                })
                .collect();
            let a = aggregate_group(0, &subjects, FS, window(), Weighting::PerSubject, 8).unwrap();
            let mut rotated = subjects.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            for s in &mut rotated {
                s.pairs.reverse();
            }
            let b = aggregate_group(0, &rotated, FS, window(), Weighting::PerSubject, 8).unwrap();
            for (x, y) in a.mean_attribution.iter().zip(&b.mean_attribution) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let scaled: Vec<SubjectBeats> = subjects
                .iter()
                .map(|s| SubjectBeats {
                    subject: s.subject.clone(),
                    pairs: s.pairs.iter().map(|p| BeatPair {
                        signal: p.signal.clone(),
                        attribution: p.attribution.iter().map(|v| v * c).collect(),
                    }).collect(),
                })
                .collect();
            let d = aggregate_group(0, &scaled, FS, window(), Weighting::PerSubject, 8).unwrap();
            let top_a = mark_topk(&a.mean_attribution, 8).unwrap();
            // Rounding can only reorder exact ties.
            let ties = top_a.windows(2).any(|w| (a.mean_attribution[w[0]] - a.mean_attribution[w[1]]).abs() < 1e-12);
            if !ties {
                prop_assert_eq!(d.topk_indices, top_a);
            }
        }
    }
}
