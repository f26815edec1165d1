//! Synthetic multi-subject imagined/listened datasets with a planted
//! imagery→listening transform.
//!
//! Each stimulus owns a set of band-limited latent sources. A listened trial
//! is `subject_mixing · latent + noise`; an imagined trial passes the latent
//! through a short latent-space FIR kernel first, adds a random onset shift
//! and is recorded at a lower SNR. Noise is band-limited and spatially
//! correlated through a per-subject channel mixing.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{
    default_channel_names, read_f64_matrix, write_f64_matrix, ConditionLabel, Stimulus, SubjectDataset, Task, TrialRecord,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::to_na;

/// Latent-space FIR length of the imagery transform.
pub const IMAGERY_TAPS: usize = 5;

/// Band for the additive sensor noise.
pub const NOISE_BAND_HZ: (f64, f64) = (0.1, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub n_repetitions: usize,
    /// Signal-to-noise variance ratio of listened trials; `inf` disables noise.
    #[serde(with = "snr_serde")]
    pub snr_listen: f64,
    #[serde(with = "snr_serde")]
    pub snr_imagine: f64,
    pub latent_dim: usize,
    /// Uniform onset jitter of imagined trials, ± this many milliseconds.
    pub jitter_ms: f64,
    pub latent_band_hz: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 11,
            n_channels: 16,
            duration_s: 27.0,
            sample_rate_hz: 100.0,
            n_repetitions: 10,
            snr_listen: 4.0,
            snr_imagine: 1.0,
            latent_dim: 4,
            jitter_ms: 250.0,
            latent_band_hz: (0.2, 1.5),
            seed: 0,
        }
    }
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid snr {t:?}"))),
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn max_shift_samples(&self) -> usize {
        (self.jitter_ms * 1e-3 * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_channels == 0 || self.n_repetitions == 0 || self.latent_dim == 0 {
            return invalid("synth counts must be positive");
        }
        if self.latent_dim > self.n_channels {
            return invalid(format!(
                "latent_dim {} exceeds n_channels {}",
                self.latent_dim, self.n_channels
            ));
        }
        if !(self.duration_s > 0.0 && self.sample_rate_hz > 0.0) || self.n_samples() < 2 {
            return invalid("duration and sample rate must give at least two samples");
        }
        if !(self.snr_listen > 0.0 && self.snr_imagine > 0.0) {
            return invalid("SNRs must be positive");
        }
        if self.snr_imagine > self.snr_listen {
            return invalid("snr_imagine must not exceed snr_listen");
        }
        if !(self.jitter_ms >= 0.0) || !self.jitter_ms.is_finite() {
            return invalid("jitter_ms must be a non-negative number");
        }
        Ok(())
    }
}

/// The planted structure behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per stimulus, `latent_dim × (T + 2·margin)`; the listened-aligned
    /// segment is columns `margin..margin + T`.
    pub latent_sources: Vec<Array2<f64>>,
    pub margin: usize,
    pub n_samples: usize,
    /// Per subject, `C × latent_dim`.
    pub subject_mixing: Vec<Array2<f64>>,
    /// Per subject, `C × C` spatial mixing of the sensor noise.
    pub noise_mixing: Vec<Array2<f64>>,
    /// `IMAGERY_TAPS` matrices of `latent_dim × latent_dim`; tap `j` acts at
    /// lag `j - IMAGERY_TAPS / 2`.
    pub imagery_kernel: Vec<Array2<f64>>,
    /// Per subject, onset shift (samples) of each trial in dataset order;
    /// zero for listened trials.
    pub onset_shifts: Vec<Vec<i64>>,
    pub subject_ids: Vec<String>,
}

impl GroundTruth {
    /// Listened-aligned latent of a stimulus, `latent_dim × T`.
    pub fn latent(&self, stimulus: Stimulus) -> Array2<f64> {
        self.latent_sources[stimulus.index()]
            .slice(s![.., self.margin..self.margin + self.n_samples])
            .to_owned()
    }

    /// Imagery transform applied to the full extended latent.
    pub fn imagined_latent_extended(&self, stimulus: Stimulus) -> Array2<f64> {
        apply_kernel(&self.imagery_kernel, &self.latent_sources[stimulus.index()])
    }
}

fn apply_kernel(kernel: &[Array2<f64>], latent: &Array2<f64>) -> Array2<f64> {
    let (l, t) = latent.dim();
    let half = (kernel.len() / 2) as isize;
    let mut out = Array2::<f64>::zeros((l, t));
    for (j, k) in kernel.iter().enumerate() {
        let lag = j as isize - half;
        for ti in 0..t as isize {
            let src = ti - lag;
            if src < 0 || src >= t as isize {
                continue;
            }
            let col = latent.column(src as usize);
            let mut dst = out.column_mut(ti as usize);
            dst += &k.dot(&col);
        }
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

fn band_limited_rows(rng: &mut impl Rng, dim: usize, n: usize, band_hz: (f64, f64), fs: f64) -> Result<Array2<f64>> {
    let (lo, hi) = band_hz;
    if !(lo > 0.0 && lo < hi && hi <= fs / 2.0) {
        return invalid(format!("band ({lo}, {hi}) Hz must lie within (0, {}]", fs / 2.0));
    }
    let in_band = |k: usize| {
        let f = k as f64 * fs / n as f64;
        f >= lo && f <= hi
    };
    let bins: Vec<usize> = (1..=n / 2).filter(|&k| in_band(k)).collect();
    if bins.is_empty() {
        return invalid(format!("band ({lo}, {hi}) Hz contains no frequency bin at T = {n}"));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = Array2::<f64>::zeros((dim, n));
    for mut row in out.rows_mut() {
        let mut buf: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        fwd.process(&mut buf);
        for (k, v) in buf.iter_mut().enumerate() {
            let mirrored = if k == 0 { 0 } else { n - k };
            let kk = k.min(mirrored);
            if k == 0 || !in_band(kk) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        inv.process(&mut buf);
        let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Degenerate("band-limited draw has zero variance".into()));
        }
        for (dst, v) in row.iter_mut().zip(vals) {
            *dst = (v - mean) / sd;
        }
    }
    Ok(out)
}

/// `dim` rows of Gaussian noise band-limited to `band_hz` by zeroing FFT
/// bins, each normalized to zero mean and unit (population) variance.
pub fn latent_band_limited_noise(
    dim: usize,
    n_samples: usize,
    band_hz: (f64, f64),
    sample_rate_hz: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    band_limited_rows(&mut rng_for(seed, 0), dim, n_samples, band_hz, sample_rate_hz)
}

/// Zero-mean, mutually orthogonal rows scaled to unit variance.
fn orthonormalize_rows(m: &mut Array2<f64>) {
    let n = m.ncols() as f64;
    for i in 0..m.nrows() {
        let mean = m.row(i).sum() / n;
        m.row_mut(i).mapv_inplace(|v| v - mean);
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j)) / m.row(j).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let sd = (m.row(i).dot(&m.row(i)) / n).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / sd);
    }
}

fn full_column_rank(a: &Array2<f64>) -> bool {
    let sv = to_na(a.view()).singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-6 * max
}

fn add_noise(rng: &mut impl Rng, signal: &Array2<f64>, snr: f64, mixing: &Array2<f64>, fs: f64) -> Result<Array2<f64>> {
    if snr.is_infinite() {
        return Ok(signal.clone());
    }
    let (c, t) = signal.dim();
    let hi = NOISE_BAND_HZ.1.min(fs / 2.0);
    let white = band_limited_rows(rng, c, t, (NOISE_BAND_HZ.0, hi), fs)?;
    let noise = mixing.dot(&white);
    let sig_var = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    let noise_var = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let scale = if sig_var > 0.0 {
        (sig_var / snr / noise_var).sqrt()
    } else {
        1.0
    };
    Ok(signal + &(noise * scale))
}

pub fn subject_id(index: usize) -> String {
    format!("sub{:02}", index + 1)
}

/// Generates `config.n_subjects` datasets and the planted ground truth.
/// The output is a pure function of `config`; subjects draw from independent
/// streams of the seed, so generation order does not matter.
pub fn generate_dataset(config: &SynthConfig) -> Result<(Vec<SubjectDataset>, GroundTruth)> {
    config.validate()?;
    let fs = config.sample_rate_hz;
    let t = config.n_samples();
    let l = config.latent_dim;
    let c = config.n_channels;
    let max_shift = config.max_shift_samples();
    let margin = max_shift + IMAGERY_TAPS / 2;
    let t_ext = t + 2 * margin;

    let mut shared = rng_for(config.seed, 0);
    let mut stacked = band_limited_rows(&mut shared, l * Stimulus::ALL.len(), t_ext, config.latent_band_hz, fs)?;
    orthonormalize_rows(&mut stacked);
    let latent_sources: Vec<Array2<f64>> = (0..Stimulus::ALL.len())
        .map(|k| stacked.slice(s![k * l..(k + 1) * l, ..]).to_owned())
        .collect();

    // centre tap near identity, weaker side taps
    let imagery_kernel: Vec<Array2<f64>> = (0..IMAGERY_TAPS)
        .map(|j| {
            let lag = j as isize - (IMAGERY_TAPS / 2) as isize;
            let noise = gaussian_matrix(&mut shared, l, l);
            if lag == 0 {
                Array2::eye(l) * 0.8 + noise * 0.15
            } else {
                noise * (0.06 / lag.unsigned_abs() as f64)
            }
        })
        .collect();
    let imagined_latents: Vec<Array2<f64>> = latent_sources
        .iter()
        .map(|lat| apply_kernel(&imagery_kernel, lat))
        .collect();

    let per_subject: Vec<(SubjectDataset, Array2<f64>, Array2<f64>, Vec<i64>)> = (0..config.n_subjects)
        .into_par_iter()
        .map(|s_idx| {
            let mut rng = rng_for(config.seed, s_idx as u64 + 1);
            let mixing = loop {
                let a = gaussian_matrix(&mut rng, c, l) / (l as f64).sqrt();
                if full_column_rank(&a) {
                    break a;
                }
            };
            let noise_mixing = gaussian_matrix(&mut rng, c, c) / (c as f64).sqrt();
            let id = subject_id(s_idx);
            let mut trials = Vec::with_capacity(8 * config.n_repetitions);
            let mut shifts = Vec::with_capacity(8 * config.n_repetitions);
            for cond in ConditionLabel::all() {
                let k = cond.stimulus.index();
                for rep in 0..config.n_repetitions {
                    let (latent, shift, snr) = match cond.task {
                        Task::Listen => (&latent_sources[k], 0i64, config.snr_listen),
                        Task::Imagine => {
                            let shift = if max_shift > 0 {
                                rng.gen_range(-(max_shift as i64)..=max_shift as i64)
                            } else {
                                0
                            };
                            (&imagined_latents[k], shift, config.snr_imagine)
                        }
                    };
                    let start = (margin as i64 + shift) as usize;
                    let window = latent.slice(s![.., start..start + t]);
                    let signal = mixing.dot(&window);
                    let data = add_noise(&mut rng, &signal, snr, &noise_mixing, fs)?;
                    trials.push(TrialRecord {
                        subject_id: id.clone(),
                        condition: cond,
                        repetition: rep as u32,
                        sample_rate_hz: fs,
                        data,
                    });
                    shifts.push(shift);
                }
            }
            let ds = SubjectDataset {
                subject_id: id,
                trials,
                channel_names: default_channel_names(c),
            };
            Ok((ds, mixing, noise_mixing, shifts))
        })
        .collect::<Result<_>>()?;

    let mut datasets = Vec::with_capacity(config.n_subjects);
    let mut subject_mixing = Vec::new();
    let mut noise_mixing = Vec::new();
    let mut onset_shifts = Vec::new();
    for (ds, a, n, sh) in per_subject {
        datasets.push(ds);
        subject_mixing.push(a);
        noise_mixing.push(n);
        onset_shifts.push(sh);
    }
    let truth = GroundTruth {
        latent_sources,
        margin,
        n_samples: t,
        subject_mixing,
        noise_mixing,
        imagery_kernel,
        onset_shifts,
        subject_ids: datasets.iter().map(|d| d.subject_id.clone()).collect(),
    };
    Ok((datasets, truth))
}

/// Trials sharing one repeatable source, for denoising checks.
#[derive(Debug, Clone)]
pub struct PlantedSource {
    pub trials: Vec<Array2<f64>>,
    pub source: Vec<f64>,
    pub pattern: Vec<f64>,
}

/// `n_repetitions` trials of `pattern · source + noise`, with the noise
/// spatially correlated through a random `C × C` mixing and drawn fresh for
/// every trial. `snr` is the per-trial signal-to-noise variance ratio.
pub fn planted_source_trials(
    n_channels: usize,
    n_repetitions: usize,
    n_samples: usize,
    sample_rate_hz: f64,
    snr: f64,
    seed: u64,
) -> Result<PlantedSource> {
    if n_channels == 0 || n_repetitions == 0 {
        return invalid("planted source needs channels and repetitions");
    }
    let mut rng = rng_for(seed, 0);
    let source = band_limited_rows(&mut rng, 1, n_samples, (0.5, 4.0), sample_rate_hz)?;
    let pattern = gaussian_matrix(&mut rng, n_channels, 1);
    let mixing = gaussian_matrix(&mut rng, n_channels, n_channels) / (n_channels as f64).sqrt();
    let signal = pattern.dot(&source);
    let trials = (0..n_repetitions)
        .map(|_| add_noise(&mut rng, &signal, snr, &mixing, sample_rate_hz))
        .collect::<Result<_>>()?;
    Ok(PlantedSource {
        trials,
        source: source.row(0).to_vec(),
        pattern: pattern.column(0).to_vec(),
    })
}

pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Copy of `dataset` whose listened trials have channel `i` replaced by
/// channel `perm[i]`; imagined trials are untouched. The resulting subject
/// needs exactly the mixing `P` (rows `e_{perm[i]}`) after a model that
/// predicts the original listened channels.
pub fn plant_channel_permutation(dataset: &SubjectDataset, perm: &[usize], new_id: &str) -> Result<SubjectDataset> {
    if perm.len() != dataset.n_channels() || !crate::data::is_permutation(perm) {
        return invalid("permutation size does not match channel count");
    }
    let trials = dataset
        .trials
        .iter()
        .map(|t| {
            let data = match t.condition.task {
                Task::Listen => t.data.select(ndarray::Axis(0), perm),
                Task::Imagine => t.data.clone(),
            };
            TrialRecord {
                subject_id: new_id.to_string(),
                data,
                ..t.clone()
            }
        })
        .collect();
    Ok(SubjectDataset {
        subject_id: new_id.to_string(),
        trials,
        channel_names: dataset.channel_names.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRef {
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthHeader {
    config: SynthConfig,
    margin: usize,
    n_samples: usize,
    subject_ids: Vec<String>,
    latent_sources: Vec<MatrixRef>,
    subject_mixing: Vec<MatrixRef>,
    noise_mixing: Vec<MatrixRef>,
    imagery_kernel: Vec<MatrixRef>,
    onset_shifts: Vec<Vec<i64>>,
}

fn write_matrix(dir: &Path, name: String, m: &Array2<f64>) -> Result<MatrixRef> {
    write_f64_matrix(&dir.join(&name), m)?;
    Ok(MatrixRef {
        file: name,
        rows: m.nrows(),
        cols: m.ncols(),
    })
}

fn read_matrix(dir: &Path, r: &MatrixRef) -> Result<Array2<f64>> {
    read_f64_matrix(&dir.join(&r.file), r.rows, r.cols)
}

/// Writes `ground_truth.json` plus row-major little-endian `f64` sidecars
/// under `dir/ground_truth/`.
pub fn save_ground_truth(truth: &GroundTruth, config: &SynthConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let sub = dir.join("ground_truth");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let many = |prefix: &str, ms: &[Array2<f64>]| -> Result<Vec<MatrixRef>> {
        ms.iter()
            .enumerate()
            .map(|(i, m)| write_matrix(dir, format!("ground_truth/{prefix}_{i:02}.f64"), m))
            .collect()
    };
    let header = GroundTruthHeader {
        config: config.clone(),
        margin: truth.margin,
        n_samples: truth.n_samples,
        subject_ids: truth.subject_ids.clone(),
        latent_sources: many("latent", &truth.latent_sources)?,
        subject_mixing: many("mixing", &truth.subject_mixing)?,
        noise_mixing: many("noise_mixing", &truth.noise_mixing)?,
        imagery_kernel: many("imagery_tap", &truth.imagery_kernel)?,
        onset_shifts: truth.onset_shifts.clone(),
    };
    let path = dir.join("ground_truth.json");
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_ground_truth(dir: impl AsRef<Path>) -> Result<(GroundTruth, SynthConfig)> {
    let dir = dir.as_ref();
    let path = dir.join("ground_truth.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let h: GroundTruthHeader = serde_json::from_str(&text).map_err(|source| Error::Manifest { path, source })?;
    let many = |refs: &[MatrixRef]| -> Result<Vec<Array2<f64>>> { refs.iter().map(|r| read_matrix(dir, r)).collect() };
    Ok((
        GroundTruth {
            latent_sources: many(&h.latent_sources)?,
            margin: h.margin,
            n_samples: h.n_samples,
            subject_mixing: many(&h.subject_mixing)?,
            noise_mixing: many(&h.noise_mixing)?,
            imagery_kernel: many(&h.imagery_kernel)?,
            onset_shifts: h.onset_shifts,
            subject_ids: h.subject_ids,
        },
        h.config,
    ))
}

/// Least-squares latent estimate `argmin ‖mixing · L − data‖`.
pub fn recover_latent(mixing: &Array2<f64>, data: &Array2<f64>) -> Result<Array2<f64>> {
    let a: DMatrix<f64> = to_na(mixing.view());
    let y: DMatrix<f64> = to_na(data.view());
    let sol = a
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(crate::linalg::to_nd(&sol))
}
