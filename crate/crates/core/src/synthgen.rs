//! Synthetic single-lead ECG with exact ground truth.
//!
//! Each beat is a sum of five Gaussian waves (P, Q, R, S, T) placed relative
//! to the R time. RR intervals follow a white, pink (1/f) or alternating
//! model standardized to the requested mean and SDNN, and the R amplitude is
//! modulated sinusoidally at the respiration frequency.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::beatdetect::FiducialSet;
use crate::error::{Error, Result};
use crate::signal_io::{AgeGroup, Cohort, EcgRecord};

/// One value per wave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waves<T> {
    pub p: T,
    pub q: T,
    pub r: T,
    pub s: T,
    pub t: T,
}

impl<T: Copy> Waves<T> {
    fn as_array(&self) -> [T; 5] {
        [self.p, self.q, self.r, self.s, self.t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RrModel {
    White,
    Pink,
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub mean_hr: f64,
    pub sdnn_target: f64,
    pub respiration_hz: f64,
    /// Peak modulation of the R amplitude as a fraction of it.
    pub respiration_depth: f64,
    /// Peak amplitudes in mV (Q and S usually negative).
    pub wave_amplitudes: Waves<f64>,
    /// Gaussian standard deviations in ms.
    pub wave_widths: Waves<f64>,
    /// Wave centers in ms relative to R.
    pub wave_offsets: Waves<f64>,
    pub duration: f64,
    pub fs: u32,
    pub rr_correlation: RrModel,
    /// Standard deviation of additive white Gaussian noise, mV.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            mean_hr: 70.0,
            sdnn_target: 40.0,
            respiration_hz: 0.25,
            respiration_depth: 0.1,
            wave_amplitudes: Waves {
                p: 0.15,
                q: -0.1,
                r: 1.0,
                s: -0.25,
                t: 0.3,
            },
            wave_widths: Waves {
                p: 20.0,
                q: 10.0,
                r: 10.0,
                s: 10.0,
                t: 40.0,
            },
            wave_offsets: Waves {
                p: -200.0,
                q: -30.0,
                r: 0.0,
                s: 30.0,
                t: 280.0,
            },
            duration: 60.0,
            fs: 500,
            rr_correlation: RrModel::White,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Ground-truth extent of a wave: center +/- this many widths. Matches where
/// a Gaussian's derivative falls to about 5 % of its maximum.
pub const WAVE_EXTENT_SIGMAS: f64 = 3.0;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(30.0..=180.0).contains(&self.mean_hr) {
            return Err(Error::invalid(format!("mean_hr {} outside [30, 180]", self.mean_hr)));
        }
        if self.fs == 0 || !(self.duration > 0.0) {
            return Err(Error::invalid("fs and duration must be positive"));
        }
        if self.duration * self.mean_hr / 60.0 < 2.0 {
            return Err(Error::invalid("duration too short for two beats"));
        }
        let finite = self
            .wave_amplitudes
            .as_array()
            .iter()
            .chain(self.wave_widths.as_array().iter())
            .chain(self.wave_offsets.as_array().iter())
            .all(|v| v.is_finite());
        if !finite || self.wave_widths.as_array().iter().any(|w| *w <= 0.0) {
            return Err(Error::invalid(
                "wave amplitudes/widths/offsets must be finite, widths positive",
            ));
        }
        if !(self.sdnn_target >= 0.0) || !(self.noise_std >= 0.0) || !(self.respiration_depth >= 0.0) {
            return Err(Error::invalid("sdnn, noise and respiration depth must be non-negative"));
        }
        Ok(())
    }

    pub fn mean_rr_ms(&self) -> f64 {
        60_000.0 / self.mean_hr
    }

    pub fn n_beats(&self) -> usize {
        (self.duration * self.mean_hr / 60.0).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub r_times: Vec<usize>,
    pub fiducials: FiducialSet,
    pub rr_ms: Vec<f64>,
    pub breathing_rate: f64,
    /// R amplitude of every beat after respiratory modulation, mV.
    pub r_amplitudes: Vec<f64>,
}

fn standardize(z: &mut [f64]) {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    z.iter_mut().for_each(|v| *v -= m);
    if z.len() < 2 {
        return;
    }
    let sd = (z.iter().map(|v| v * v).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 {
        z.iter_mut().for_each(|v| *v /= sd);
    }
}

/// 1/f noise by spectral synthesis: random phases, amplitude f^(-1/2).
pub(crate) fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let m = n.next_power_of_two().max(2);
    let mut spec = vec![Complex::new(0.0, 0.0); m];
    for k in 1..=m / 2 {
        let amp = (k as f64).powf(-0.5);
        let phase = rng.random::<f64>() * 2.0 * PI;
        spec[k] = Complex::from_polar(amp, phase);
        if k != m / 2 {
            spec[m - k] = spec[k].conj();
        }
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(m).process(&mut spec);
    spec.iter().take(n).map(|c| c.re).collect()
}

fn rr_noise(model: RrModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z: Vec<f64> = match model {
        RrModel::White => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        RrModel::Pink => pink_noise(n, rng),
        RrModel::Alternating => (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let e: f64 = StandardNormal.sample(rng);
                sign + 0.05 * e
            })
            .collect(),
    };
    standardize(&mut z);
    z
}

/// Generates one record and its ground truth. Deterministic per `params.seed`.
pub fn synth_record(record_id: &str, params: &SynthParams) -> Result<(EcgRecord, GroundTruth)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let fs = params.fs as f64;
    let n_samples = (params.duration * fs).round() as usize;
    let n_beats = params.n_beats();
    let mean_rr = params.mean_rr_ms();

    let z = if params.sdnn_target > 0.0 {
        rr_noise(params.rr_correlation, n_beats - 1, &mut rng)
    } else {
        vec![0.0; n_beats - 1]
    };
    let rr_cont: Vec<f64> = z.iter().map(|v| mean_rr + params.sdnn_target * v).collect();
    if rr_cont.iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("sdnn_target too large: non-positive RR interval"));
    }
    let mut t_ms = 0.5 * mean_rr;
    let mut r_times = Vec::with_capacity(n_beats);
    r_times.push((t_ms * fs / 1000.0).round() as usize);
    for rr in &rr_cont {
        t_ms += rr;
        r_times.push((t_ms * fs / 1000.0).round() as usize);
    }
    let resp_phase = rng.random::<f64>() * 2.0 * PI;

    let amps = params.wave_amplitudes.as_array();
    let widths: Vec<f64> = params.wave_widths.as_array().iter().map(|w| w * fs / 1000.0).collect();
    let offsets: Vec<f64> = params.wave_offsets.as_array().iter().map(|o| o * fs / 1000.0).collect();

    let mut x = vec![0.0; n_samples];
    let mut r_amplitudes = Vec::with_capacity(n_beats);
    for &r in &r_times {
        let t_r = r as f64 / fs;
        let mod_r = 1.0 + params.respiration_depth * (2.0 * PI * params.respiration_hz * t_r + resp_phase).sin();
        for w in 0..5 {
            let amp = if w == 2 { amps[w] * mod_r } else { amps[w] };
            if w == 2 {
                r_amplitudes.push(amp);
            }
            if amp == 0.0 {
                continue;
            }
            let center = r as f64 + offsets[w];
            let reach = 6.0 * widths[w];
            let lo = (center - reach).floor().max(0.0) as usize;
            let hi = ((center + reach).ceil() as isize).min(n_samples as isize - 1);
            if hi < 0 {
                continue;
            }
            for (i, xi) in x.iter_mut().enumerate().take(hi as usize + 1).skip(lo) {
                let d = (i as f64 - center) / widths[w];
                *xi += amp * (-0.5 * d * d).exp();
            }
        }
    }
    if params.noise_std > 0.0 {
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += params.noise_std * e;
        }
    }

    let fiducials = truth_fiducials(params, &r_times, n_samples);
    let rr_ms = r_times.windows(2).map(|w| (w[1] - w[0]) as f64 * 1000.0 / fs).collect();
    let record = EcgRecord::new(record_id, x, params.fs)?;
    Ok((
        record,
        GroundTruth {
            r_times,
            fiducials,
            rr_ms,
            breathing_rate: 60.0 * params.respiration_hz,
            r_amplitudes,
        },
    ))
}

fn truth_fiducials(params: &SynthParams, r_times: &[usize], n: usize) -> FiducialSet {
    let to_samples = |ms: f64| ms * params.fs as f64 / 1000.0;
    let at = |r: usize, ms: f64| -> Option<usize> {
        let v = (r as f64 + to_samples(ms)).round();
        (v >= 0.0 && (v as usize) < n).then_some(v as usize)
    };
    let a = &params.wave_amplitudes;
    let o = &params.wave_offsets;
    let w = &params.wave_widths;
    let mut f = FiducialSet::default();
    for &r in r_times {
        let has = |amp: f64| amp != 0.0;
        let p = has(a.p);
        f.p_on
            .push(if p { at(r, o.p - WAVE_EXTENT_SIGMAS * w.p) } else { None });
        f.p_peak.push(if p { at(r, o.p) } else { None });
        f.p_off
            .push(if p { at(r, o.p + WAVE_EXTENT_SIGMAS * w.p) } else { None });
        f.q.push(if has(a.q) { at(r, o.q) } else { None });
        f.r.push(r);
        f.s.push(if has(a.s) { at(r, o.s) } else { None });
        f.t_peak.push(if has(a.t) { at(r, o.t) } else { None });
        f.t_off.push(if has(a.t) {
            at(r, o.t + WAVE_EXTENT_SIGMAS * w.t)
        } else {
            None
        });
    }
    f
}

/// Adds white Gaussian noise at the given signal-to-noise ratio, where the
/// signal power is the mean square of the mean-removed record.
pub fn add_noise_snr(record: &EcgRecord, snr_db: f64, seed: u64) -> EcgRecord {
    let m = record.samples.iter().sum::<f64>() / record.samples.len() as f64;
    let power = record.samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / record.samples.len() as f64;
    let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = record
        .samples
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + sd * e
        })
        .collect();
    EcgRecord {
        samples,
        ..record.clone()
    }
}

/// Per-age-group generator parameters, indexed by group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub groups: Vec<SynthParams>,
}

impl Default for TrendSpec {
    /// Defaults follow the reported aging directions: breathing rate and SDNN
    /// fall with age while P-wave amplitude rises. Heart rate is held fixed.
    fn default() -> Self {
        let groups = (0..AgeGroup::COUNT)
            .map(|g| {
                let g = g as f64;
                let mut p = SynthParams {
                    duration: 360.0,
                    noise_std: 0.01,
                    respiration_hz: 0.42 - 0.016 * g,
                    sdnn_target: 56.0 - 2.0 * g,
                    ..SynthParams::default()
                };
                p.wave_amplitudes.p = 0.10 + 0.008 * g;
                p
            })
            .collect();
        TrendSpec { groups }
    }
}

/// Flat CSV row of a trend specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrendRow {
    group: usize,
    mean_hr: f64,
    sdnn_target: f64,
    respiration_hz: f64,
    respiration_depth: f64,
    p_mv: f64,
    q_mv: f64,
    r_mv: f64,
    s_mv: f64,
    t_mv: f64,
    p_width_ms: f64,
    q_width_ms: f64,
    r_width_ms: f64,
    s_width_ms: f64,
    t_width_ms: f64,
    p_offset_ms: f64,
    q_offset_ms: f64,
    r_offset_ms: f64,
    s_offset_ms: f64,
    t_offset_ms: f64,
    duration_s: f64,
    fs: u32,
    rr_model: RrModel,
    noise_mv: f64,
}

impl TrendSpec {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (group, p) in self.groups.iter().enumerate() {
            let (a, wd, o) = (&p.wave_amplitudes, &p.wave_widths, &p.wave_offsets);
            w.serialize(TrendRow {
                group,
                mean_hr: p.mean_hr,
                sdnn_target: p.sdnn_target,
                respiration_hz: p.respiration_hz,
                respiration_depth: p.respiration_depth,
                p_mv: a.p,
                q_mv: a.q,
                r_mv: a.r,
                s_mv: a.s,
                t_mv: a.t,
                p_width_ms: wd.p,
                q_width_ms: wd.q,
                r_width_ms: wd.r,
                s_width_ms: wd.s,
                t_width_ms: wd.t,
                p_offset_ms: o.p,
                q_offset_ms: o.q,
                r_offset_ms: o.r,
                s_offset_ms: o.s,
                t_offset_ms: o.t,
                duration_s: p.duration,
                fs: p.fs,
                rr_model: p.rr_correlation,
                noise_mv: p.noise_std,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::invalid(format!("{other:?}")),
            })?;
        let mut by_group: BTreeMap<usize, SynthParams> = BTreeMap::new();
        for row in r.deserialize() {
            let t: TrendRow = row?;
            by_group.insert(
                t.group,
                SynthParams {
                    mean_hr: t.mean_hr,
                    sdnn_target: t.sdnn_target,
                    respiration_hz: t.respiration_hz,
                    respiration_depth: t.respiration_depth,
                    wave_amplitudes: Waves {
                        p: t.p_mv,
                        q: t.q_mv,
                        r: t.r_mv,
                        s: t.s_mv,
                        t: t.t_mv,
                    },
                    wave_widths: Waves {
                        p: t.p_width_ms,
                        q: t.q_width_ms,
                        r: t.r_width_ms,
                        s: t.s_width_ms,
                        t: t.t_width_ms,
                    },
                    wave_offsets: Waves {
                        p: t.p_offset_ms,
                        q: t.q_offset_ms,
                        r: t.r_offset_ms,
                        s: t.s_offset_ms,
                        t: t.t_offset_ms,
                    },
                    duration: t.duration_s,
                    fs: t.fs,
                    rr_correlation: t.rr_model,
                    noise_std: t.noise_mv,
                    seed: 0,
                },
            );
        }
        let groups = (0..AgeGroup::COUNT)
            .map(|g| by_group.remove(&g).ok_or(Error::MissingGroup(g)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrendSpec { groups })
    }
}

/// Relative per-record jitter applied to rates, amplitudes and variability.
pub const JITTER: f64 = 0.05;

/// A synthetic cohort with its ground truth and the jittered parameters that
/// produced every record.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub truth: BTreeMap<String, GroundTruth>,
    pub params: BTreeMap<String, SynthParams>,
    /// Integer ages in years, one per record, consistent with the group.
    pub ages: BTreeMap<String, u32>,
}

/// Record id used for the `i`-th record of a group.
pub fn record_id(group: AgeGroup, i: usize) -> String {
    format!("g{:02}_{:03}", group.index(), i)
}

fn jittered(base: &SynthParams, rng: &mut ChaCha8Rng) -> SynthParams {
    let mut j = || 1.0 + JITTER * (2.0 * rng.random::<f64>() - 1.0);
    let mut p = base.clone();
    p.mean_hr *= j();
    p.sdnn_target *= j();
    p.respiration_hz *= j();
    p.respiration_depth *= j();
    p.wave_amplitudes.p *= j();
    p.wave_amplitudes.q *= j();
    p.wave_amplitudes.r *= j();
    p.wave_amplitudes.s *= j();
    p.wave_amplitudes.t *= j();
    p
}

/// `n_per_group` records for each of the 15 groups. Records are generated in
/// parallel from per-record seeds drawn sequentially from `seed`.
pub fn synth_cohort(spec: &TrendSpec, n_per_group: usize, seed: u64) -> Result<SynthCohort> {
    use rayon::prelude::*;

    if spec.groups.len() < AgeGroup::COUNT {
        return Err(Error::MissingGroup(spec.groups.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(AgeGroup::COUNT * n_per_group);
    for group in AgeGroup::all() {
        let span = group.hi() - group.lo() + 1;
        for i in 0..n_per_group {
            let mut p = jittered(&spec.groups[group.index()], &mut rng);
            p.seed = rng.random();
            let age = group.lo() + (i as u32 % span);
            jobs.push((group, record_id(group, i), p, age));
        }
    }
    let generated = jobs
        .par_iter()
        .map(|(group, id, p, _)| synth_record(id, p).map(|(rec, gt)| (rec.with_age_group(*group), gt)))
        .collect::<Result<Vec<_>>>()?;
    let mut truth = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut ages = BTreeMap::new();
    let mut records = Vec::with_capacity(generated.len());
    for ((rec, gt), (_, id, p, age)) in generated.into_iter().zip(jobs) {
        truth.insert(id.clone(), gt);
        params.insert(id.clone(), p);
        ages.insert(id, age);
        records.push(rec);
    }
    Ok(SynthCohort {
        cohort: Cohort::new(records)?,
        truth,
        params,
        ages,
    })
}
