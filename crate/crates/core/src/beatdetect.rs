//! R-peak detection, fiducial-point delineation and beat segmentation.
//!
//! The detector follows the Pan-Tompkins chain: 5-15 Hz band-pass,
//! five-point derivative, squaring, 150 ms moving-window integration and
//! adaptive signal/noise thresholds with search-back. Detected positions
//! are refined to the raw-signal maximum within +/-50 ms.

use serde::{Deserialize, Serialize};

use crate::dsp::{self, Biquad};
use crate::error::{Error, Result};
use crate::signal_io::EcgRecord;

/// Per-beat landmark indices. Every landmark vector has one entry per beat;
/// only `r` is mandatory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FiducialSet {
    pub p_on: Vec<Option<usize>>,
    pub p_peak: Vec<Option<usize>>,
    pub p_off: Vec<Option<usize>>,
    pub q: Vec<Option<usize>>,
    pub r: Vec<usize>,
    pub s: Vec<Option<usize>>,
    pub t_peak: Vec<Option<usize>>,
    pub t_off: Vec<Option<usize>>,
}

/// Landmarks of a single beat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Beat {
    pub p_on: Option<usize>,
    pub p_peak: Option<usize>,
    pub p_off: Option<usize>,
    pub q: Option<usize>,
    pub r: usize,
    pub s: Option<usize>,
    pub t_peak: Option<usize>,
    pub t_off: Option<usize>,
}

impl Beat {
    /// Landmarks in physiological order, paired with whether the step from
    /// the previous landmark may be an equality.
    fn ordered(&self) -> [(Option<usize>, bool); 8] {
        [
            (self.p_on, false),
            (self.p_peak, true),
            (self.p_off, true),
            (self.q, false),
            (Some(self.r), false),
            (self.s, false),
            (self.t_peak, false),
            (self.t_off, true),
        ]
    }

    /// `p_on <= p_peak <= p_off < q < r < s < t_peak <= t_off` over the
    /// landmarks that are present.
    pub fn is_ordered(&self) -> bool {
        let mut prev: Option<usize> = None;
        for (v, allow_eq) in self.ordered() {
            if let Some(v) = v {
                if let Some(p) = prev {
                    if v < p || (v == p && !allow_eq) {
                        return false;
                    }
                }
                prev = Some(v);
            }
        }
        true
    }

    /// Drops landmarks that would break the ordering, anchored at R.
    fn sanitize(&mut self) {
        let mut v = self.ordered();
        // Left of R: the later landmark's flag decides whether equality is allowed.
        let (mut bound, mut bound_eq) = (self.r, false);
        for i in (0..4).rev() {
            if let Some(x) = v[i].0 {
                if x < bound || (x == bound && bound_eq) {
                    bound = x;
                    bound_eq = v[i].1;
                } else {
                    v[i].0 = None;
                }
            }
        }
        let mut bound = self.r;
        for item in v.iter_mut().skip(5) {
            if let Some(x) = item.0 {
                if x > bound || (x == bound && item.1) {
                    bound = x;
                } else {
                    item.0 = None;
                }
            }
        }
        self.p_on = v[0].0;
        self.p_peak = v[1].0;
        self.p_off = v[2].0;
        self.q = v[3].0;
        self.s = v[5].0;
        self.t_peak = v[6].0;
        self.t_off = v[7].0;
        debug_assert!(self.is_ordered());
    }
}

impl FiducialSet {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn beat(&self, i: usize) -> Beat {
        Beat {
            p_on: self.p_on[i],
            p_peak: self.p_peak[i],
            p_off: self.p_off[i],
            q: self.q[i],
            r: self.r[i],
            s: self.s[i],
            t_peak: self.t_peak[i],
            t_off: self.t_off[i],
        }
    }

    pub fn push(&mut self, b: Beat) {
        self.p_on.push(b.p_on);
        self.p_peak.push(b.p_peak);
        self.p_off.push(b.p_off);
        self.q.push(b.q);
        self.r.push(b.r);
        self.s.push(b.s);
        self.t_peak.push(b.t_peak);
        self.t_off.push(b.t_off);
    }

    pub fn beats(&self) -> impl Iterator<Item = Beat> + '_ {
        (0..self.len()).map(|i| self.beat(i))
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub band_hz: (f64, f64),
    pub integration_ms: f64,
    pub refractory_ms: f64,
    pub refine_ms: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            band_hz: (5.0, 15.0),
            integration_ms: 150.0,
            refractory_ms: 200.0,
            refine_ms: 50.0,
        }
    }
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

pub fn detect_rpeaks(record: &EcgRecord) -> Result<Vec<usize>> {
    detect_rpeaks_with(&record.samples, record.fs as f64, &DetectorConfig::default())
}

pub fn detect_rpeaks_with(x: &[f64], fs: f64, cfg: &DetectorConfig) -> Result<Vec<usize>> {
    if (x.len() as f64) < 3.0 * fs {
        return Err(Error::TooShort(format!(
            "{:.2} s of signal, R-peak detection needs 3 s",
            x.len() as f64 / fs
        )));
    }
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::FlatSignal);
    }
    let hi_cut = cfg.band_hz.1.min(0.45 * fs);
    let band = dsp::filtfilt(&[Biquad::highpass(cfg.band_hz.0, fs), Biquad::lowpass(hi_cut, fs)], x);
    let n = band.len();
    let mut deriv = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        deriv[i] = (-band[i - 2] - 2.0 * band[i - 1] + 2.0 * band[i + 1] + band[i + 2]) / 8.0;
    }
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let mwi = running_mean(&squared, ms_to_samples(cfg.integration_ms, fs).max(1));

    let refractory = ms_to_samples(cfg.refractory_ms, fs).max(1);
    let candidates = local_peaks(&mwi, refractory);

    let learn = (2.0 * fs) as usize;
    let learn_slice = &mwi[..learn.min(n)];
    let mut spki = 0.25 * learn_slice.iter().cloned().fold(0.0, f64::max);
    let mut npki = 0.5 * dsp::mean(learn_slice);
    let slope_half = ms_to_samples(75.0, fs).max(1);
    let max_slope = |i: usize| -> f64 {
        let a = i.saturating_sub(slope_half);
        let b = (i + slope_half).min(n - 1);
        deriv[a..=b].iter().map(|v| v.abs()).fold(0.0, f64::max)
    };

    let mut qrs: Vec<usize> = Vec::new();
    let mut qrs_slope: Vec<f64> = Vec::new();
    let mut noise_peaks: Vec<usize> = Vec::new();
    let t_wave_window = ms_to_samples(360.0, fs);
    for &i in &candidates {
        let pk = mwi[i];
        let th1 = npki + 0.25 * (spki - npki);
        let th2 = 0.5 * th1;

        // Search back for a missed beat before considering this candidate.
        if let Some(&last) = qrs.last() {
            let rr_avg = mean_recent_rr(&qrs, 8);
            if let Some(rr_avg) = rr_avg {
                if (i - last) as f64 > 1.66 * rr_avg {
                    let best = noise_peaks
                        .iter()
                        .copied()
                        .filter(|&j| j > last + refractory && j + refractory < i && mwi[j] > th2)
                        .max_by(|a, b| mwi[*a].total_cmp(&mwi[*b]));
                    if let Some(j) = best {
                        spki = 0.25 * mwi[j] + 0.75 * spki;
                        qrs.push(j);
                        qrs_slope.push(max_slope(j));
                    }
                }
            }
        }

        let mut is_qrs = pk > th1;
        if is_qrs {
            if let (Some(&last), Some(&last_slope)) = (qrs.last(), qrs_slope.last()) {
                let t_wave = || i - last < t_wave_window && max_slope(i) < 0.5 * last_slope;
                if i <= last + refractory || t_wave() {
                    is_qrs = false;
                }
            }
        }
        if is_qrs {
            spki = 0.125 * pk + 0.875 * spki;
            qrs.push(i);
            qrs_slope.push(max_slope(i));
        } else {
            npki = 0.125 * pk + 0.875 * npki;
            noise_peaks.push(i);
        }
    }

    let refine = ms_to_samples(cfg.refine_ms, fs);
    let mut peaks: Vec<usize> = qrs
        .iter()
        .map(|&i| {
            let a = i.saturating_sub(refine);
            let b = (i + refine).min(n - 1);
            (a..=b)
                .max_by(|p, q| x[*p].total_cmp(&x[*q]).then(q.cmp(p)))
                .unwrap_or(i)
        })
        .collect();
    peaks.sort_unstable();
    let mut out: Vec<usize> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match out.last_mut() {
            Some(last) if p <= *last + refractory => {
                if x[p] > x[*last] {
                    *last = p;
                }
            }
            _ => out.push(p),
        }
    }
    if out.len() < 2 {
        return Err(Error::TooFewPeaks);
    }
    Ok(out)
}

fn mean_recent_rr(qrs: &[usize], k: usize) -> Option<f64> {
    if qrs.len() < 2 {
        return None;
    }
    let start = qrs.len().saturating_sub(k + 1);
    let w = &qrs[start..];
    Some((w[w.len() - 1] - w[0]) as f64 / (w.len() - 1) as f64)
}

/// Centered moving mean via a running sum.
fn running_mean(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

/// Local maxima separated by more than `min_gap` samples (the larger wins).
fn local_peaks(x: &[f64], min_gap: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if x[i] > x[i - 1] && x[i] >= x[i + 1] {
            match out.last_mut() {
                Some(last) if i - *last <= min_gap => {
                    if x[i] > x[*last] {
                        *last = i;
                    }
                }
                _ => out.push(i),
            }
        }
    }
    out
}

/// Detection scoring against reference peaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchStats {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl MatchStats {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }
}

/// One-to-one matching of sorted peak lists within `tolerance` samples.
pub fn match_peaks(detected: &[usize], reference: &[usize], tolerance: usize) -> MatchStats {
    let (mut i, mut j, mut tp) = (0, 0, 0);
    while i < detected.len() && j < reference.len() {
        let (d, r) = (detected[i], reference[j]);
        if d.abs_diff(r) <= tolerance {
            tp += 1;
            i += 1;
            j += 1;
        } else if d < r {
            i += 1;
        } else {
            j += 1;
        }
    }
    MatchStats {
        true_pos: tp,
        false_pos: detected.len() - tp,
        false_neg: reference.len() - tp,
    }
}

#[derive(Debug, Clone)]
pub struct DelineationConfig {
    pub q_window_ms: f64,
    pub s_window_ms: f64,
    /// P search window, ms before R (start, end).
    pub p_window_ms: (f64, f64),
    /// T search window, ms after R (start, end), clipped to the RR.
    pub t_window_ms: (f64, f64),
    /// Onset/offset where the smoothed derivative drops below this fraction
    /// of the wave's steepest slope.
    pub slope_fraction: f64,
    /// Minimum P/T prominence relative to the R height.
    pub min_prominence: f64,
    pub smooth_ms: f64,
}

impl Default for DelineationConfig {
    fn default() -> Self {
        DelineationConfig {
            q_window_ms: 80.0,
            s_window_ms: 80.0,
            p_window_ms: (250.0, 50.0),
            t_window_ms: (80.0, 420.0),
            slope_fraction: 0.05,
            min_prominence: 0.03,
            smooth_ms: 10.0,
        }
    }
}

pub fn delineate_fiducials(record: &EcgRecord, rpeaks: &[usize]) -> FiducialSet {
    delineate_with(&record.samples, record.fs as f64, rpeaks, &DelineationConfig::default())
}

/// Delineates every beat; landmarks that cannot be located are `None`.
pub fn delineate_with(x: &[f64], fs: f64, rpeaks: &[usize], cfg: &DelineationConfig) -> FiducialSet {
    let smooth = dsp::moving_average(x, ms_to_samples(cfg.smooth_ms, fs).max(1));
    let slope_src = dsp::moving_average(x, ms_to_samples(2.0 * cfg.smooth_ms, fs).max(1));
    let n = x.len();
    let mut deriv = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        deriv[i] = 0.5 * (slope_src[i + 1] - slope_src[i - 1]);
    }
    let mut rs: Vec<usize> = rpeaks.iter().copied().filter(|&r| r < n).collect();
    rs.sort_unstable();
    rs.dedup();
    let mut out = FiducialSet::default();
    for (k, &r) in rs.iter().enumerate() {
        let prev = k.checked_sub(1).map(|j| rs[j]);
        let next = rs.get(k + 1).copied();
        out.push(delineate_beat_inner(x, &smooth, &deriv, fs, r, prev, next, cfg));
    }
    out
}

/// Delineates one beat of `x` with R at `r` (neighbouring R positions are
/// optional, e.g. for an averaged single beat).
pub fn delineate_beat(
    x: &[f64],
    fs: f64,
    r: usize,
    prev_r: Option<usize>,
    next_r: Option<usize>,
    cfg: &DelineationConfig,
) -> Beat {
    let mut rs = vec![r];
    if let Some(p) = prev_r {
        rs.insert(0, p);
    }
    if let Some(nx) = next_r {
        rs.push(nx);
    }
    let set = delineate_with(x, fs, &rs, cfg);
    let idx = set.r.iter().position(|&v| v == r).unwrap_or(0);
    set.beat(idx)
}

#[allow(clippy::too_many_arguments)]
fn delineate_beat_inner(
    x: &[f64],
    smooth: &[f64],
    deriv: &[f64],
    fs: f64,
    r: usize,
    prev: Option<usize>,
    next: Option<usize>,
    cfg: &DelineationConfig,
) -> Beat {
    let n = x.len();
    let ms = |v: f64| ms_to_samples(v, fs);
    let rr_prev = prev.map(|p| r - p);
    let rr_next = next.map(|nx| nx - r);
    let rr = rr_next.or(rr_prev).unwrap_or(n);
    let rr_before = rr_prev.unwrap_or(rr);

    let lo_bound = prev.map(|p| p + (0.6 * (r - p) as f64) as usize).unwrap_or(0);
    let hi_bound = next
        .map(|nx| r + (0.8 * (nx - r) as f64) as usize)
        .unwrap_or(r + (0.8 * rr as f64) as usize)
        .min(n - 1);

    let local_lo = r.saturating_sub((0.4 * rr_before as f64) as usize).max(lo_bound);
    let local_hi = (r + (0.6 * rr as f64) as usize).min(n - 1);
    let baseline = dsp::median(&smooth[local_lo..=local_hi]).unwrap_or(0.0);
    let r_height = (smooth[r] - baseline).abs().max(f64::EPSILON);

    let mut beat = Beat { r, ..Beat::default() };

    // Q and S: interior minima in fixed windows around R.
    let q_lo = r.saturating_sub(ms(cfg.q_window_ms)).max(lo_bound);
    if r > q_lo + 1 {
        beat.q = interior_extremum(smooth, q_lo, r, false);
    }
    let s_hi = (r + ms(cfg.s_window_ms)).min(hi_bound);
    if s_hi > r + 1 {
        beat.s = interior_extremum(smooth, r, s_hi, false);
    }

    // P: most prominent maximum in the pre-R window.
    let p_lo = r.saturating_sub(ms(cfg.p_window_ms.0)).max(lo_bound);
    let p_hi = r.saturating_sub(ms(cfg.p_window_ms.1));
    if p_hi > p_lo + 1 {
        if let Some(p) = prominent_peak(smooth, p_lo, p_hi, cfg.min_prominence * r_height) {
            beat.p_peak = Some(p);
            let search_lo = p.saturating_sub(ms(200.0)).max(lo_bound);
            beat.p_on = onset(deriv, search_lo, p, cfg.slope_fraction);
            let off_hi = beat.q.unwrap_or(r);
            beat.p_off = offset(deriv, p, off_hi, cfg.slope_fraction);
        }
    }

    // T: most prominent maximum in the post-R window, clipped to the RR.
    let t_lo = (r + ms(cfg.t_window_ms.0)).min(n - 1);
    let t_hi = (r + ms(cfg.t_window_ms.1).min((0.7 * rr as f64) as usize)).min(hi_bound);
    if t_hi > t_lo + 1 {
        if let Some(t) = prominent_peak(smooth, t_lo, t_hi, cfg.min_prominence * r_height) {
            beat.t_peak = Some(t);
            beat.t_off = offset(deriv, t, hi_bound, cfg.slope_fraction);
        }
    }
    beat.sanitize();
    beat
}

/// Index of the minimum (or maximum) of `x[lo..=hi]` if it is a strict
/// interior extremum of the window.
fn interior_extremum(x: &[f64], lo: usize, hi: usize, maximum: bool) -> Option<usize> {
    let key = |i: usize| if maximum { -x[i] } else { x[i] };
    let best = (lo..=hi).min_by(|a, b| key(*a).total_cmp(&key(*b)).then(a.cmp(b)))?;
    (best > lo && best < hi && key(best) < key(best - 1) && key(best) <= key(best + 1)).then_some(best)
}

/// Largest interior maximum of `x[lo..=hi]` whose prominence inside the
/// window (peak minus the higher of the two flanking minima) reaches `min_prom`.
fn prominent_peak(x: &[f64], lo: usize, hi: usize, min_prom: f64) -> Option<usize> {
    let p = interior_extremum(x, lo, hi, true)?;
    let left_min = x[lo..=p].iter().cloned().fold(f64::INFINITY, f64::min);
    let right_min = x[p..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
    let prom = x[p] - left_min.max(right_min);
    (prom >= min_prom).then_some(p)
}

/// Walks left from the steepest rising slope in `[lo, peak]` until the slope
/// drops below `frac` of it.
fn onset(deriv: &[f64], lo: usize, peak: usize, frac: f64) -> Option<usize> {
    let m = (lo..=peak).max_by(|a, b| deriv[*a].total_cmp(&deriv[*b]))?;
    let steep = deriv[m];
    if steep <= 0.0 {
        return None;
    }
    (lo..=m).rev().find(|&i| deriv[i] < frac * steep)
}

/// Walks right from the steepest falling slope in `[peak, hi]` until the
/// slope magnitude drops below `frac` of it.
fn offset(deriv: &[f64], peak: usize, hi: usize, frac: f64) -> Option<usize> {
    if hi <= peak {
        return None;
    }
    let m = (peak..=hi).min_by(|a, b| deriv[*a].total_cmp(&deriv[*b]))?;
    let steep = deriv[m];
    if steep >= 0.0 {
        return None;
    }
    (m..=hi).find(|&i| deriv[i] > frac * steep)
}

/// Beat window around R in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatWindow {
    pub pre_ms: f64,
    pub post_ms: f64,
}

impl Default for BeatWindow {
    fn default() -> Self {
        BeatWindow {
            pre_ms: 300.0,
            post_ms: 500.0,
        }
    }
}

impl BeatWindow {
    /// Samples before and after R.
    pub fn samples(&self, fs: f64) -> (usize, usize) {
        (ms_to_samples(self.pre_ms, fs), ms_to_samples(self.post_ms, fs))
    }

    /// Row length: pre + post + 1 (R included).
    pub fn len(&self, fs: f64) -> usize {
        let (a, b) = self.samples(fs);
        a + b + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Beats cut around R, with the R index that produced each row.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatMatrix {
    pub rows: Vec<Vec<f64>>,
    pub r_peaks: Vec<usize>,
}

/// Slices one row per R-peak whose window fits entirely in the signal.
pub fn segment_signal(x: &[f64], fs: f64, rpeaks: &[usize], window: BeatWindow) -> Result<BeatMatrix> {
    let (pre, post) = window.samples(fs);
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    for &r in rpeaks {
        if r >= pre && r + post < x.len() {
            rows.push(x[r - pre..=r + post].to_vec());
            kept.push(r);
        }
    }
    if rows.is_empty() {
        return Err(Error::NoBeatFits);
    }
    Ok(BeatMatrix { rows, r_peaks: kept })
}

pub fn segment_beats(record: &EcgRecord, rpeaks: &[usize], window: BeatWindow) -> Result<BeatMatrix> {
    segment_signal(&record.samples, record.fs as f64, rpeaks, window)
}
