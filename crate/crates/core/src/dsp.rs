//! Small signal-processing toolbox shared by the other modules: zero-phase
//! IIR and FIR filtering, Welch spectra, interpolation and robust statistics.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

/// Second-order IIR section in direct form I, normalized so that `a0 = 1`.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth (Q = 1/sqrt 2) low-pass via the bilinear transform.
    pub fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b: [(1.0 - cos) / 2.0 / a0, (1.0 - cos) / a0, (1.0 - cos) / 2.0 / a0],
            a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    /// Butterworth (Q = 1/sqrt 2) high-pass via the bilinear transform.
    pub fn highpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b: [(1.0 + cos) / 2.0 / a0, -(1.0 + cos) / a0, (1.0 + cos) / 2.0 / a0],
            a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        // Start from the steady state of the first sample to avoid a step transient.
        if let Some(&first) = x.first() {
            let dc_gain = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[1] + self.a[2]);
            x1 = first;
            x2 = first;
            y1 = first * dc_gain;
            y2 = y1;
        }
        for (xi, yi) in x.iter().zip(y.iter_mut()) {
            let out = self.b[0] * xi + self.b[1] * x1 + self.b[2] * x2 - self.a[1] * y1 - self.a[2] * y2;
            x2 = x1;
            x1 = *xi;
            y2 = y1;
            y1 = out;
            *yi = out;
        }
        y
    }
}

/// Forward-backward filtering through a cascade of sections (zero phase).
///
/// The input is padded with an odd reflection of `pad` samples on both ends.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let pad = (3 * 64).min(x.len() - 1);
    let mut ext = Vec::with_capacity(x.len() + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    let last = x[x.len() - 1];
    for i in 1..=pad {
        ext.push(2.0 * last - x[x.len() - 1 - i]);
    }
    let mut y = ext;
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    y[pad..pad + x.len()].to_vec()
}

/// Windowed-sinc (Blackman) low-pass with unit DC gain. `cutoff` is in
/// cycles per sample (0 < cutoff < 0.5); `taps` is forced odd.
pub fn fir_lowpass(cutoff: f64, taps: usize) -> Vec<f64> {
    let taps = taps | 1;
    let m = (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as f64 - m / 2.0;
            let sinc = if n == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * n).sin() / (PI * n)
            };
            let w = 0.42 - 0.5 * (2.0 * PI * i as f64 / m).cos() + 0.08 * (4.0 * PI * i as f64 / m).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Centered convolution with a symmetric kernel (zero phase), holding the
/// edge samples outside the signal.
pub fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            h.iter()
                .enumerate()
                .map(|(j, hj)| {
                    let idx = i as isize + j as isize - half as isize;
                    let idx = idx.clamp(0, n as isize - 1) as usize;
                    hj * x[idx]
                })
                .sum()
        })
        .collect()
}

/// Centered moving average over `width` samples (forced odd), edge-held.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1) | 1;
    let h = vec![1.0 / width as f64; width];
    convolve_same(x, &h)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Median of finite values; `None` for an empty slice.
pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Removes the least-squares line from `x` (index as abscissa).
pub fn detrend_linear(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let x_mean = mean(x);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(i, v)| v - x_mean - slope * (i as f64 - t_mean))
        .collect()
}

/// Linear interpolation of the points `(xs, ys)` (xs strictly increasing) on
/// a uniform grid `start, start + step, ...` up to and including `end`.
pub fn interp_uniform(xs: &[f64], ys: &[f64], start: f64, end: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if xs.is_empty() {
        return out;
    }
    let mut k = 0usize;
    let mut i = 0usize;
    loop {
        let t = start + i as f64 * step;
        if t > end + 1e-9 {
            break;
        }
        while k + 1 < xs.len() && xs[k + 1] < t {
            k += 1;
        }
        let v = if t <= xs[0] {
            ys[0]
        } else if k + 1 >= xs.len() {
            ys[xs.len() - 1]
        } else {
            let f = (t - xs[k]) / (xs[k + 1] - xs[k]);
            ys[k] + f * (ys[k + 1] - ys[k])
        };
        out.push(v);
        i += 1;
    }
    out
}

/// One-sided power spectral density estimate.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
}

impl Spectrum {
    pub fn df(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// Rectangle-rule power over bins with `lo <= f < hi`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let df = self.df();
        self.freqs
            .iter()
            .zip(&self.psd)
            .filter(|(f, _)| **f >= lo && **f < hi)
            .map(|(_, p)| p * df)
            .sum()
    }

    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.df()
    }
}

/// Welch's method: Hann window, 50 % overlap, per-segment mean removal,
/// density scaling. `nperseg` is clipped to the signal length.
pub fn welch(x: &[f64], fs: f64, nperseg: usize) -> Spectrum {
    let nperseg = nperseg.min(x.len()).max(2);
    let step = (nperseg / 2).max(1);
    let window: Vec<f64> = (0..nperseg)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / nperseg as f64).cos())
        .collect();
    let win_ss: f64 = window.iter().map(|w| w * w).sum();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nperseg);
    let n_bins = nperseg / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut n_seg = 0usize;
    let mut start = 0usize;
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let m = mean(seg);
        let mut buf: Vec<Complex<f64>> = seg
            .iter()
            .zip(&window)
            .map(|(v, w)| Complex::new((v - m) * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        n_seg += 1;
        start += step;
    }
    let scale = 1.0 / (fs * win_ss * n_seg as f64);
    let psd = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (nperseg % 2 == 0 && k == n_bins - 1) {
                1.0
            } else {
                2.0
            };
            a * scale * one_sided
        })
        .collect();
    let freqs = (0..n_bins).map(|k| k as f64 * fs / nperseg as f64).collect();
    Spectrum { freqs, psd }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fir_lowpass_has_unit_dc_gain() {
        let h = fir_lowpass(0.045, 81);
        assert_eq!(h.len(), 81);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filtfilt_passes_constant() {
        let x = vec![3.5; 500];
        let y = filtfilt(&[Biquad::lowpass(15.0, 250.0)], &x);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-9));
        let y = filtfilt(&[Biquad::highpass(5.0, 250.0)], &x);
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn welch_parseval_for_sinusoid() {
        let fs = 4.0;
        let x: Vec<f64> = (0..4096).map(|i| (2.0 * PI * 0.25 * i as f64 / fs).sin()).collect();
        let s = welch(&x, fs, 256);
        // Power of a unit sinusoid is 1/2.
        assert!((s.total_power() - 0.5).abs() < 0.01);
        let peak = s.psd.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((s.freqs[peak] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn detrend_removes_line() {
        let x: Vec<f64> = (0..50).map(|i| 2.0 + 0.3 * i as f64).collect();
        assert!(detrend_linear(&x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn interp_uniform_linear() {
        let v = interp_uniform(&[0.0, 1.0, 2.0], &[0.0, 10.0, 0.0], 0.0, 2.0, 0.5);
        assert_eq!(v, vec![0.0, 5.0, 10.0, 5.0, 0.0]);
    }
}
