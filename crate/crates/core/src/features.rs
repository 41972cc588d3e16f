//! Short-range (per-beat, averaged per record) and long-range HRV features.
//!
//! Conventions: sample (n - 1) standard deviations, strict inequality in
//! pNNx, and SDANNk as the *mean of per-segment SDNNs* over consecutive
//! complete k-minute segments. The classical SDANN (standard deviation of
//! segment means) is available as [`sdann_classical`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beatdetect::{self, FiducialSet};
use crate::dsp;
use crate::error::{Error, Result};
use crate::signal_io::EcgRecord;

/// Feature columns in table order.
pub const FEATURE_NAMES: [&str; 22] = [
    "SR_rr_mean_ms",
    "SR_hr_bpm",
    "SR_p_mV",
    "SR_q_mV",
    "SR_r_mV",
    "SR_s_mV",
    "SR_t_mV",
    "HRV_SDNN",
    "HRV_RMSSD",
    "HRV_pNN20",
    "HRV_pNN50",
    "HRV_MCVNN",
    "HRV_SDANN1",
    "HRV_SDANN5",
    "HRV_LF",
    "HRV_HF",
    "HRV_LFHF",
    "HRV_alpha1",
    "HRV_alpha2",
    "HRV_PAS",
    "HRV_breathing_rate_bpm",
    "HRV_breathing_signal_power",
];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

/// Normal-to-normal intervals with their occurrence times (end of interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnSeries {
    pub rr_ms: Vec<f64>,
    pub t_ms: Vec<f64>,
    /// Intervals dropped by the plausibility filter.
    pub removed: usize,
}

impl NnSeries {
    /// Builds a series whose first interval starts at time zero.
    pub fn from_rr(rr_ms: Vec<f64>) -> Result<Self> {
        if rr_ms.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("RR intervals must be positive and finite"));
        }
        let mut t = 0.0;
        let t_ms = rr_ms
            .iter()
            .map(|rr| {
                t += rr;
                t
            })
            .collect();
        Ok(NnSeries {
            rr_ms,
            t_ms,
            removed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rr_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rr_ms.is_empty()
    }

    /// Time at which the first interval starts.
    pub fn start_ms(&self) -> f64 {
        self.t_ms[0] - self.rr_ms[0]
    }

    pub fn duration_ms(&self) -> f64 {
        self.t_ms[self.len() - 1] - self.start_ms()
    }

    /// Every interval multiplied by `c` (occurrence times rescaled too).
    pub fn scaled(&self, c: f64) -> Self {
        NnSeries {
            rr_ms: self.rr_ms.iter().map(|v| v * c).collect(),
            t_ms: self.t_ms.iter().map(|v| v * c).collect(),
            removed: self.removed,
        }
    }
}

/// Plausible NN interval range in ms; intervals outside are treated as
/// ectopy or detection artifacts.
pub const NN_RANGE_MS: (f64, f64) = (300.0, 2000.0);

pub fn nn_intervals(rpeaks: &[usize], fs: f64) -> Result<NnSeries> {
    nn_intervals_with(rpeaks, fs, NN_RANGE_MS)
}

pub fn nn_intervals_with(rpeaks: &[usize], fs: f64, range: (f64, f64)) -> Result<NnSeries> {
    if rpeaks.len() < 2 {
        return Err(Error::TooFewPeaks);
    }
    let mut rr = Vec::with_capacity(rpeaks.len() - 1);
    let mut t = Vec::with_capacity(rpeaks.len() - 1);
    let mut removed = 0;
    for w in rpeaks.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("R-peaks must be strictly increasing"));
        }
        let v = (w[1] - w[0]) as f64 * 1000.0 / fs;
        if v < range.0 || v > range.1 {
            removed += 1;
        } else {
            rr.push(v);
            t.push(w[1] as f64 * 1000.0 / fs);
        }
    }
    if removed > 0 {
        log::debug!("{removed} RR intervals outside {range:?} ms removed");
    }
    if rr.len() < 2 {
        return Err(Error::TooShort(format!("{} NN intervals remain", rr.len())));
    }
    Ok(NnSeries {
        rr_ms: rr,
        t_ms: t,
        removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDomain {
    pub sdnn: f64,
    pub rmssd: f64,
    pub pnn20: f64,
    pub pnn50: f64,
    pub mcvnn: f64,
    pub sdann1: Option<f64>,
    pub sdann5: Option<f64>,
}

fn pnn(diffs: &[f64], threshold_ms: f64) -> f64 {
    100.0 * diffs.iter().filter(|d| d.abs() > threshold_ms).count() as f64 / diffs.len() as f64
}

pub fn time_domain_hrv(nn: &NnSeries) -> Result<TimeDomain> {
    if nn.len() < 2 {
        return Err(Error::TooShort("time-domain HRV needs two intervals".into()));
    }
    let rr = &nn.rr_ms;
    let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    let med = dsp::median(rr).unwrap_or(0.0);
    let abs_dev: Vec<f64> = rr.iter().map(|v| (v - med).abs()).collect();
    let mad = dsp::median(&abs_dev).unwrap_or(0.0);
    Ok(TimeDomain {
        sdnn: dsp::sample_std(rr),
        rmssd,
        pnn20: pnn(&diffs, 20.0),
        pnn50: pnn(&diffs, 50.0),
        mcvnn: mad / med,
        sdann1: sdann(nn, 1.0),
        sdann5: sdann(nn, 5.0),
    })
}

/// Intervals grouped into consecutive complete `minutes`-long segments.
fn segments(nn: &NnSeries, minutes: f64) -> Option<Vec<Vec<f64>>> {
    let len_ms = minutes * 60_000.0;
    if nn.is_empty() || nn.duration_ms() < len_ms {
        return None;
    }
    let start = nn.start_ms();
    let n_full = (nn.duration_ms() / len_ms).floor() as usize;
    let mut segs = vec![Vec::new(); n_full];
    for (rr, t) in nn.rr_ms.iter().zip(&nn.t_ms) {
        let k = ((t - start) / len_ms).floor() as usize;
        // An interval ending exactly on a boundary belongs to the earlier segment.
        let k = if (t - start) % len_ms == 0.0 && k > 0 { k - 1 } else { k };
        if k < n_full {
            segs[k].push(*rr);
        }
    }
    Some(segs)
}

/// Mean over complete k-minute segments of each segment's SDNN; `None` when
/// the series is shorter than k minutes.
pub fn sdann(nn: &NnSeries, minutes: f64) -> Option<f64> {
    let sds: Vec<f64> = segments(nn, minutes)?
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| dsp::sample_std(s))
        .collect();
    (!sds.is_empty()).then(|| dsp::mean(&sds))
}

/// Classical SDANN: standard deviation of the segment means.
pub fn sdann_classical(nn: &NnSeries, minutes: f64) -> Option<f64> {
    let means: Vec<f64> = segments(nn, minutes)?
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| dsp::mean(s))
        .collect();
    (means.len() >= 2).then(|| dsp::sample_std(&means))
}

/// Detrended fluctuation F(n): RMS residual of per-box least-squares line
/// fits to the integrated, mean-removed profile over non-overlapping boxes.
pub fn dfa_fluctuation(x: &[f64], box_size: usize) -> f64 {
    let m = dsp::mean(x);
    let mut acc = 0.0;
    let profile: Vec<f64> = x
        .iter()
        .map(|v| {
            acc += v - m;
            acc
        })
        .collect();
    let n_boxes = profile.len() / box_size;
    let t_mean = (box_size - 1) as f64 / 2.0;
    let sxx: f64 = (0..box_size).map(|i| (i as f64 - t_mean).powi(2)).sum();
    let mut total = 0.0;
    for b in 0..n_boxes {
        let seg = &profile[b * box_size..(b + 1) * box_size];
        let y_mean = dsp::mean(seg);
        let sxy: f64 = seg
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - t_mean) * (y - y_mean))
            .sum();
        let slope = sxy / sxx;
        total += seg
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let r = y - y_mean - slope * (i as f64 - t_mean);
                r * r
            })
            .sum::<f64>();
    }
    (total / (n_boxes * box_size) as f64).sqrt()
}

/// Small-box correction for linear detrending: uncorrelated noise has
/// E[F(n)^2] proportional to (n^2 - 4) / n, so F is rescaled by
/// sqrt(n^2 / (n^2 - 4)) to restore the n^(1/2) law at short scales.
pub fn dfa_small_box_correction(n: usize) -> f64 {
    let n = n as f64;
    (n * n / (n * n - 4.0)).sqrt()
}

/// Least-squares slope of log F(n) against log n over `scales`, with F
/// corrected for small boxes.
pub fn dfa_exponent(x: &[f64], scales: impl IntoIterator<Item = usize>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = scales
        .into_iter()
        .filter(|&n| n >= 3 && n <= x.len() / 2)
        .map(|n| ((n as f64).ln(), dfa_fluctuation(x, n) * dfa_small_box_correction(n)))
        .filter(|(_, f)| *f > 0.0)
        .map(|(ln_n, f)| (ln_n, f.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = pts.iter().map(|(a, _)| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    slope.is_finite().then_some(slope)
}

pub const ALPHA1_SCALES: (usize, usize) = (4, 16);
pub const ALPHA2_SCALES: (usize, usize) = (16, 64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfaAlpha {
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
}

/// Short- (4-16 beats, needs 100 intervals) and long-term (16-64 beats,
/// needs 300 intervals) DFA exponents.
pub fn dfa_alpha(nn: &NnSeries) -> DfaAlpha {
    let rr = &nn.rr_ms;
    DfaAlpha {
        alpha1: (rr.len() >= 100)
            .then(|| dfa_exponent(rr, ALPHA1_SCALES.0..=ALPHA1_SCALES.1))
            .flatten(),
        alpha2: (rr.len() >= 300)
            .then(|| dfa_exponent(rr, ALPHA2_SCALES.0..=ALPHA2_SCALES.1))
            .flatten(),
    }
}

/// Mean of alpha1 and alpha2. Not part of the default feature set.
pub fn alpha_mean(a: &DfaAlpha) -> Option<f64> {
    Some(0.5 * (a.alpha1? + a.alpha2?))
}

pub const TACHOGRAM_FS: f64 = 4.0;
pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.40);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqDomain {
    pub lf: f64,
    pub hf: f64,
    pub lfhf: Option<f64>,
    pub total: f64,
}

/// LF/HF band powers (ms^2) of the 4 Hz resampled tachogram (Welch, 256-point
/// segments). Needs two minutes of data.
pub fn freq_domain_hrv(nn: &NnSeries) -> Result<FreqDomain> {
    if nn.len() < 2 || nn.duration_ms() < 120_000.0 {
        return Err(Error::TooShort("frequency-domain HRV needs 2 minutes".into()));
    }
    let t: Vec<f64> = nn.t_ms.iter().map(|v| v / 1000.0).collect();
    let grid = dsp::interp_uniform(&t, &nn.rr_ms, t[0], t[t.len() - 1], 1.0 / TACHOGRAM_FS);
    let spec = dsp::welch(&grid, TACHOGRAM_FS, 256);
    let lf = spec.band_power(LF_BAND.0, LF_BAND.1);
    let hf = spec.band_power(HF_BAND.0, HF_BAND.1);
    Ok(FreqDomain {
        lf,
        hf,
        lfhf: (hf > 0.0).then(|| lf / hf),
        total: spec.total_power(),
    })
}

/// Percentage of intervals inside alternation segments: maximal runs of
/// successive differences with strictly alternating signs spanning at least
/// four differences. Zero differences break a run. `None` below 5 intervals.
pub fn fragmentation_pas(nn: &NnSeries) -> Option<f64> {
    let rr = &nn.rr_ms;
    if rr.len() < 5 {
        return None;
    }
    let signs: Vec<i8> = rr
        .windows(2)
        .map(|w| match (w[1] - w[0]).partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => 0,
        })
        .collect();
    let mut inside = vec![false; rr.len()];
    let mut i = 0;
    while i < signs.len() {
        if signs[i] == 0 {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < signs.len() && signs[j] != 0 && signs[j] == -signs[j - 1] {
            j += 1;
        }
        // Differences i..j span intervals i..=j.
        if j - i >= 4 {
            inside[i..=j].iter_mut().for_each(|v| *v = true);
        }
        i = j;
    }
    Some(100.0 * inside.iter().filter(|v| **v).count() as f64 / rr.len() as f64)
}

pub const BREATHING_BAND: (f64, f64) = (0.1, 0.5);
/// Share of breathing-band power that the peak (+/- one bin) must hold for
/// a rate to be reported.
pub const BREATHING_PEAK_SHARE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breathing {
    pub rate_bpm: Option<f64>,
    pub signal_power: f64,
}

/// ECG-derived respiration from beat-to-beat R amplitude modulation.
pub fn edr_breathing(record: &EcgRecord, rpeaks: &[usize]) -> Result<Breathing> {
    if rpeaks.len() < 30 {
        return Err(Error::TooShort(format!("{} beats, EDR needs 30", rpeaks.len())));
    }
    let fs = record.fs as f64;
    let x = &record.samples;
    let half = (0.4 * fs) as usize;
    let mut times = Vec::with_capacity(rpeaks.len());
    let mut amps = Vec::with_capacity(rpeaks.len());
    for &r in rpeaks {
        let a = r.saturating_sub(half);
        let b = (r + half).min(x.len() - 1);
        let base = dsp::median(&x[a..=b]).unwrap_or(0.0);
        times.push(r as f64 / fs);
        amps.push(x[r] - base);
    }
    let grid = dsp::interp_uniform(&times, &amps, times[0], times[times.len() - 1], 1.0 / TACHOGRAM_FS);
    let resp = dsp::detrend_linear(&grid);
    let spec = dsp::welch(&resp, TACHOGRAM_FS, 512);
    let band_power = spec.band_power(BREATHING_BAND.0, BREATHING_BAND.1);
    let in_band: Vec<usize> = (0..spec.freqs.len())
        .filter(|&k| spec.freqs[k] >= BREATHING_BAND.0 && spec.freqs[k] < BREATHING_BAND.1)
        .collect();
    let mean_amp = dsp::mean(&amps).abs().max(f64::EPSILON);
    let mut rate = None;
    if let Some(&k) = in_band.iter().max_by(|a, b| spec.psd[**a].total_cmp(&spec.psd[**b])) {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(spec.psd.len() - 1);
        let peak_power: f64 = spec.psd[lo..=hi].iter().sum::<f64>() * spec.df();
        if band_power > 1e-12 * mean_amp * mean_amp && peak_power >= BREATHING_PEAK_SHARE * band_power {
            // Parabolic refinement of the peak frequency.
            let mut f = spec.freqs[k];
            if k > 0 && k + 1 < spec.psd.len() {
                let (a, b, c) = (spec.psd[k - 1], spec.psd[k], spec.psd[k + 1]);
                let denom = a - 2.0 * b + c;
                if denom < 0.0 {
                    f += 0.5 * (a - c) / denom * spec.df();
                }
            }
            rate = Some(60.0 * f);
        }
    }
    Ok(Breathing {
        rate_bpm: rate,
        signal_power: band_power,
    })
}

/// Short-range values of one beat. Amplitudes are relative to the beat's
/// isoelectric baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SrBeat {
    pub rr_ms: Option<f64>,
    pub hr_bpm: Option<f64>,
    pub p_mv: Option<f64>,
    pub q_mv: Option<f64>,
    pub r_mv: Option<f64>,
    pub s_mv: Option<f64>,
    pub t_mv: Option<f64>,
}

/// Baseline of beat `i`: median of the TP segment from the previous T offset
/// (or 60 % into the previous RR) to this P onset (or 280 ms before R).
fn beat_baseline(x: &[f64], fs: f64, f: &FiducialSet, i: usize) -> Option<f64> {
    let r = f.r[i];
    let end = f.p_on[i].unwrap_or_else(|| r.saturating_sub((0.28 * fs) as usize));
    let start = if i > 0 {
        f.t_off[i - 1].unwrap_or(f.r[i - 1] + (0.6 * (r - f.r[i - 1]) as f64) as usize)
    } else {
        end.saturating_sub((0.1 * fs) as usize)
    };
    (end > start && end <= x.len())
        .then(|| dsp::median(&x[start..end]))
        .flatten()
}

pub fn sr_beat_features(record: &EcgRecord, fiducials: &FiducialSet) -> Vec<SrBeat> {
    let x = &record.samples;
    let fs = record.fs as f64;
    (0..fiducials.len())
        .map(|i| {
            let b = fiducials.beat(i);
            let rr = fiducials.r.get(i + 1).map(|next| (next - b.r) as f64 * 1000.0 / fs);
            let base = beat_baseline(x, fs, fiducials, i);
            let amp = |idx: Option<usize>| -> Option<f64> { Some(x[idx?] - base?) };
            SrBeat {
                rr_ms: rr,
                hr_bpm: rr.map(|v| 60_000.0 / v),
                p_mv: amp(b.p_peak),
                q_mv: amp(b.q),
                r_mv: amp(Some(b.r)),
                s_mv: amp(b.s),
                t_mv: amp(b.t_peak),
            }
        })
        .collect()
}

/// Named features of one record; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub record_id: String,
    pub values: Vec<Option<f64>>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values[feature_index(name)?]
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, Option<f64>> {
        FEATURE_NAMES.iter().copied().zip(self.values.iter().copied()).collect()
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| dsp::mean(&v))
}

/// Features of a record from its R-peaks and fiducials.
pub fn features_from_beats(record: &EcgRecord, rpeaks: &[usize], fiducials: &FiducialSet) -> FeatureVector {
    let sr = sr_beat_features(record, fiducials);
    let rr_mean = mean_present(sr.iter().map(|b| b.rr_ms));
    let mut v: Vec<Option<f64>> = vec![
        rr_mean,
        rr_mean.map(|m| 60_000.0 / m),
        mean_present(sr.iter().map(|b| b.p_mv)),
        mean_present(sr.iter().map(|b| b.q_mv)),
        mean_present(sr.iter().map(|b| b.r_mv)),
        mean_present(sr.iter().map(|b| b.s_mv)),
        mean_present(sr.iter().map(|b| b.t_mv)),
    ];
    let nn = nn_intervals(rpeaks, record.fs as f64).ok();
    let td = nn.as_ref().and_then(|nn| time_domain_hrv(nn).ok());
    v.extend([
        td.map(|t| t.sdnn),
        td.map(|t| t.rmssd),
        td.map(|t| t.pnn20),
        td.map(|t| t.pnn50),
        td.map(|t| t.mcvnn),
        td.and_then(|t| t.sdann1),
        td.and_then(|t| t.sdann5),
    ]);
    let fd = nn.as_ref().and_then(|nn| freq_domain_hrv(nn).ok());
    v.extend([fd.map(|f| f.lf), fd.map(|f| f.hf), fd.and_then(|f| f.lfhf)]);
    let dfa = nn.as_ref().map(dfa_alpha);
    v.extend([dfa.and_then(|d| d.alpha1), dfa.and_then(|d| d.alpha2)]);
    v.push(nn.as_ref().and_then(fragmentation_pas));
    let br = edr_breathing(record, rpeaks).ok();
    v.extend([br.and_then(|b| b.rate_bpm), br.map(|b| b.signal_power)]);
    debug_assert_eq!(v.len(), FEATURE_NAMES.len());
    FeatureVector {
        record_id: record.record_id.clone(),
        values: v,
    }
}

/// Detects beats, delineates them and computes every feature of a record.
pub fn record_feature_vector(record: &EcgRecord) -> Result<FeatureVector> {
    let rpeaks = beatdetect::detect_rpeaks(record)?;
    let fid = beatdetect::delineate_fiducials(record, &rpeaks);
    Ok(features_from_beats(record, &rpeaks, &fid))
}

/// Feature table with optional age-group labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub record_ids: Vec<String>,
    pub groups: Vec<Option<usize>>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl FeatureTable {
    pub fn from_vectors(vectors: Vec<FeatureVector>, groups: Vec<Option<usize>>) -> Self {
        FeatureTable {
            record_ids: vectors.iter().map(|v| v.record_id.clone()).collect(),
            groups,
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            rows: vectors.into_iter().map(|v| v.values).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with missing values as NaN, the representation used by the
    /// tree learner.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Subset of rows by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        FeatureTable {
            record_ids: idx.iter().map(|&i| self.record_ids[i].clone()).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            names: self.names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// The named columns in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::FeatureLayout(format!("column {n} not in table")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureTable {
            record_ids: self.record_ids.clone(),
            groups: self.groups.clone(),
            names: names.to_vec(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
        })
    }

    /// CSV: `record_id,age_group,<features...>`; empty cell = missing.
    /// `preamble` lines are written first as `#` comments.
    pub fn write_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        let mut out = String::new();
        for line in preamble {
            out.push_str(&format!("# {line}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["record_id".to_string(), "age_group".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for ((id, g), row) in self.record_ids.iter().zip(&self.groups).zip(&self.rows) {
            let mut rec = vec![id.clone(), g.map(|g| g.to_string()).unwrap_or_default()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::invalid(format!("{other:?}")),
            })?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 || header[0] != "record_id" || header[1] != "age_group" {
            return Err(Error::FeatureLayout(
                "feature table must start with record_id,age_group".into(),
            ));
        }
        let mut t = FeatureTable {
            names: header[2..].to_vec(),
            ..Default::default()
        };
        for rec in r.records() {
            let rec = rec?;
            t.record_ids.push(rec[0].to_string());
            t.groups.push(if rec[1].is_empty() {
                None
            } else {
                Some(
                    rec[1]
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad age group {:?}", &rec[1])))?,
                )
            });
            let row = rec
                .iter()
                .skip(2)
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::invalid(format!("bad feature value {c:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            t.rows.push(row);
        }
        Ok(t)
    }
}
