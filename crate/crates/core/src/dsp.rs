//! Preprocessing primitives: zero-phase Butterworth bandpass, bad-channel
//! screening, per-channel z-scoring and decimation.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SubjectDataset, TrialRecord};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandpassSpec {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
}

impl BandpassSpec {
    pub fn new(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Self {
        BandpassSpec {
            order,
            low_hz,
            high_hz,
            sample_rate_hz,
        }
    }

    /// Third-order 0.1–8 Hz.
    pub fn analysis_band(sample_rate_hz: f64) -> Self {
        Self::new(3, 0.1, 8.0, sample_rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate_hz / 2.0;
        if self.order < 1 {
            return invalid("bandpass order must be at least 1");
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return invalid(format!(
                "bandpass edges must satisfy 0 < low ({}) < high ({}) < nyquist ({})",
                self.low_hz, self.high_hz, nyq
            ));
        }
        Ok(())
    }

    /// Default reflection padding: `3 × (2 × order + 1)` samples.
    pub fn default_padlen(&self) -> usize {
        3 * (2 * self.order + 1)
    }
}

/// One biquad, `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Section {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    fn poles(&self) -> [Complex64; 2] {
        // z² + a1 z + a2 = 0
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    /// Steady-state transposed direct-form-II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let dc = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * dc;
        let z1 = self.b1 - self.a1 * dc + z2;
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    fn scaled(&self, g: f64) -> Section {
        Section {
            b0: self.b0 * g,
            b1: self.b1 * g,
            b2: self.b2 * g,
            ..*self
        }
    }
}

/// Cascade of second-order sections with an overall gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirCascade {
    pub sections: Vec<Section>,
    pub gain: f64,
}

impl IirCascade {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        self.response(freq_hz, sample_rate_hz).norm()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Sections with the gain folded into the first numerator.
    fn effective_sections(&self) -> Vec<Section> {
        let mut s = self.sections.clone();
        if let Some(first) = s.first_mut() {
            *first = first.scaled(self.gain);
        }
        s
    }

    /// Runs the cascade over `x` in place, starting every section from its
    /// steady state for a constant input equal to `x[0]`.
    fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for sec in self.effective_sections() {
            let zi = sec.step_state();
            let (mut z1, mut z2) = (zi[0] * level, zi[1] * level);
            for v in x.iter_mut() {
                let input = *v;
                let y = sec.b0 * input + z1;
                z1 = sec.b1 * input - sec.a1 * y + z2;
                z2 = sec.b2 * input - sec.a2 * y;
                *v = y;
            }
            level *= sec.dc_gain();
        }
    }
}

/// Digital Butterworth bandpass of the given prototype order (the cascade
/// has `order` sections, `2 × order` poles), designed by bilinear transform
/// with pre-warped band edges and normalized to unit gain at the centre.
pub fn design_bandpass(spec: &BandpassSpec) -> Result<IirCascade> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n = spec.order;
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(spec.low_hz), warp(spec.high_hz));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    // analog lowpass prototype poles on the unit circle, then lowpass→bandpass
    let mut analog = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let root = (half * half - w0 * w0).sqrt();
        analog.push(half + root);
        analog.push(half - root);
    }
    let two_fs = 2.0 * fs;
    let digital: Vec<Complex64> = analog
        .iter()
        .map(|&s| (two_fs + s) / (two_fs - s))
        .collect();

    let sections = pair_poles(&digital)
        .into_iter()
        .map(|(p, q)| {
            let a1 = -(p + q).re;
            let a2 = (p * q).re;
            Section {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1,
                a2,
            }
        })
        .collect::<Vec<_>>();

    let mut cascade = IirCascade { sections, gain: 1.0 };
    let f0 = fs / PI * (w0 / two_fs).atan();
    cascade.gain = 1.0 / cascade.magnitude(f0, fs);
    if !cascade.is_stable() {
        return Err(Error::Degenerate("designed bandpass is unstable".into()));
    }
    Ok(cascade)
}

/// Groups poles into conjugate pairs; real poles are paired by magnitude.
fn pair_poles(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    let scale = poles.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let tol = 1e-10 * scale;
    let mut pairs = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for &p in poles {
        if p.im.abs() <= tol {
            reals.push(p.re);
        } else if p.im > 0.0 {
            pairs.push((p, p.conj()));
        }
    }
    reals.sort_by(f64::total_cmp);
    for chunk in reals.chunks(2) {
        let a = Complex64::new(chunk[0], 0.0);
        let b = Complex64::new(*chunk.get(1).unwrap_or(&0.0), 0.0);
        pairs.push((a, b));
    }
    pairs
}

/// Zero-phase forward–backward filtering with odd reflection padding of
/// `padlen` samples at each end.
pub fn filtfilt(cascade: &IirCascade, signal: &[f64], padlen: usize) -> Result<Vec<f64>> {
    let n = signal.len();
    if padlen == 0 || n <= 3 * padlen {
        return invalid(format!(
            "filtfilt: signal of {n} samples is too short for padlen {padlen} (need > {})",
            3 * padlen
        ));
    }
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    let (first, last) = (signal[0], signal[n - 1]);
    ext.extend((1..=padlen).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=padlen).map(|i| 2.0 * last - signal[n - 1 - i]));

    cascade.filter_in_place(&mut ext);
    ext.reverse();
    cascade.filter_in_place(&mut ext);
    ext.reverse();
    Ok(ext[padlen..padlen + n].to_vec())
}

/// Applies [`filtfilt`] to every channel of a trial.
pub fn filtfilt_trial(cascade: &IirCascade, trial: &TrialRecord, padlen: usize) -> Result<TrialRecord> {
    let rows: Vec<Vec<f64>> = (0..trial.n_channels())
        .into_par_iter()
        .map(|ch| filtfilt(cascade, &trial.data.row(ch).to_vec(), padlen))
        .collect::<Result<_>>()?;
    let (c, t) = trial.data.dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(TrialRecord {
        data: Array2::from_shape_vec((c, t), flat).expect("same shape"),
        ..trial.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub variances: Vec<f64>,
    /// Robust z-score of each channel's log-variance (`NaN` for zero variance).
    pub z_scores: Vec<f64>,
    pub removed: Vec<usize>,
    pub kept: Vec<usize>,
    pub z_threshold: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Floor on the robust spread of channel log-variances. With few channels the
/// MAD can be tiny by chance; at threshold 5 this floor means a channel must
/// differ from the median variance by more than e^2.5 ≈ 12× to be flagged.
pub const MIN_LOG_VARIANCE_SD: f64 = 0.5;

/// Flags channels whose variance (pooled over all trials and samples) is
/// zero, or whose log-variance deviates from the channel median by more than
/// `z_threshold` robust standard deviations (1.4826 × MAD, floored at
/// [`MIN_LOG_VARIANCE_SD`]).
pub fn screen_bad_channels(dataset: &SubjectDataset, z_threshold: f64) -> Result<(Vec<usize>, ScreenReport)> {
    let c = dataset.n_channels();
    if c < 2 {
        return invalid("channel screening needs at least two channels");
    }
    if dataset.trials.is_empty() {
        return invalid("channel screening on an empty dataset");
    }
    let variances: Vec<f64> = (0..c)
        .map(|ch| {
            let mut n = 0usize;
            let mut sum = 0.0;
            for t in &dataset.trials {
                sum += t.data.row(ch).sum();
                n += t.n_samples();
            }
            let m = sum / n as f64;
            let ss: f64 = dataset
                .trials
                .iter()
                .map(|t| t.data.row(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum();
            ss / n as f64
        })
        .collect();

    let logs: Vec<Option<f64>> = variances
        .iter()
        .map(|&v| (v > 0.0).then(|| v.ln()))
        .collect();
    let mut live: Vec<f64> = logs.iter().flatten().copied().collect();
    live.sort_by(f64::total_cmp);
    let (med, mad) = if live.is_empty() {
        (0.0, 0.0)
    } else {
        let med = median(&live);
        let mut dev: Vec<f64> = live.iter().map(|v| (v - med).abs()).collect();
        dev.sort_by(f64::total_cmp);
        (med, median(&dev))
    };
    let sigma = (1.4826 * mad).max(MIN_LOG_VARIANCE_SD);
    let z_scores: Vec<f64> = logs.iter().map(|l| l.map_or(f64::NAN, |l| (l - med) / sigma)).collect();

    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (i, z) in z_scores.iter().enumerate() {
        if z.is_nan() || z.abs() > z_threshold {
            removed.push(i);
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "subject {}: every channel was flagged as bad",
            dataset.subject_id
        )));
    }
    let report = ScreenReport {
        variances,
        z_scores,
        removed,
        kept: kept.clone(),
        z_threshold,
    };
    Ok((kept, report))
}

/// Per-channel z-scoring with statistics pooled over all given trials
/// (population standard deviation).
pub fn zscore_channels(trials: &[TrialRecord]) -> Result<Vec<TrialRecord>> {
    let Some(first) = trials.first() else {
        return Ok(Vec::new());
    };
    let c = first.n_channels();
    if trials.iter().any(|t| t.n_channels() != c) {
        return invalid("zscore_channels: trials disagree on channel count");
    }
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let reference = first.data[[ch, 0]];
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut constant = true;
        for t in trials {
            let row = t.data.row(ch);
            sum += row.sum();
            n += row.len();
            constant &= row.iter().all(|&v| v == reference);
        }
        let m = sum / n as f64;
        let ss: f64 = trials
            .iter()
            .map(|t| t.data.row(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum();
        let sd = (ss / n as f64).sqrt();
        if constant || sd == 0.0 {
            return Err(Error::Degenerate(format!(
                "channel {ch} has zero variance; screen it out before z-scoring"
            )));
        }
        stats.push((m, sd));
    }
    Ok(trials
        .iter()
        .map(|t| {
            let mut data = t.data.clone();
            for (mut row, &(m, sd)) in data.axis_iter_mut(Axis(0)).zip(&stats) {
                row.mapv_inplace(|v| (v - m) / sd);
            }
            TrialRecord { data, ..t.clone() }
        })
        .collect())
}

/// Keeps every `factor`-th sample starting at index 0.
pub fn decimate(trial: &TrialRecord, factor: usize) -> Result<TrialRecord> {
    if factor < 1 {
        return invalid("decimation factor must be at least 1");
    }
    let idx: Vec<usize> = (0..trial.n_samples()).step_by(factor).collect();
    Ok(TrialRecord {
        data: trial.data.select(Axis(1), &idx),
        sample_rate_hz: trial.sample_rate_hz / factor as f64,
        ..trial.clone()
    })
}
