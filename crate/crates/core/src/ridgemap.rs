//! Sliding-window ridge regression from imagined to listened responses.
//!
//! Within a window the design matrix has one row per time sample (pooled
//! over training pairs) and one column per channel, so each window learns an
//! instantaneous `C × C` map. Folds hold out one imagined trial at a time.

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Stimulus, SubjectDataset, Task, TrialPairing};
use crate::error::{invalid, Error, Result};
use crate::linalg::{to_na, to_nd};
use crate::synth::random_permutation;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_ms: f64,
    pub step_ms: f64,
    pub sample_rate_hz: f64,
}

impl WindowSpec {
    pub fn new(window_ms: f64, step_ms: f64, sample_rate_hz: f64) -> Result<Self> {
        let spec = WindowSpec {
            window_ms,
            step_ms,
            sample_rate_hz,
        };
        spec.samples()?;
        Ok(spec)
    }

    /// 500 ms windows advancing by 100 ms.
    pub fn default_for(sample_rate_hz: f64) -> Result<Self> {
        Self::new(500.0, 100.0, sample_rate_hz)
    }

    /// `(window, step)` in samples.
    pub fn samples(&self) -> Result<(usize, usize)> {
        let to_samples = |ms: f64, what: &str| -> Result<usize> {
            let x = ms * self.sample_rate_hz / 1000.0;
            let r = x.round();
            if !x.is_finite() || r < 1.0 || (x - r).abs() > 1e-9 * r.max(1.0) {
                return invalid(format!(
                    "{what} of {ms} ms is not a whole number of samples at {} Hz",
                    self.sample_rate_hz
                ));
            }
            Ok(r as usize)
        };
        let win = to_samples(self.window_ms, "window")?;
        let step = to_samples(self.step_ms, "step")?;
        if step > win {
            return invalid(format!("step {step} exceeds window {win} samples"));
        }
        Ok((win, step))
    }
}

/// Half-open `[start, end)` windows covering a trial of `n_samples`.
pub fn sliding_windows(n_samples: usize, spec: &WindowSpec) -> Result<Vec<(usize, usize)>> {
    let (win, step) = spec.samples()?;
    if n_samples < win {
        return invalid(format!("trial of {n_samples} samples is shorter than the {win}-sample window"));
    }
    let count = (n_samples - win) / step + 1;
    Ok((0..count).map(|k| (k * step, k * step + win)).collect())
}

fn solve_normal(gram: &DMatrix<f64>, cross: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid(format!("ridge lambda must be finite and non-negative, got {lambda}"));
    }
    let n = gram.nrows();
    let a = gram + DMatrix::<f64>::identity(n, n) * lambda;
    if lambda == 0.0 {
        let sv = a.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if !(hi > 0.0) || lo <= hi * 1e-13 {
            return Err(Error::Degenerate("ridge: XᵀX is singular and lambda is 0".into()));
        }
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(cross)),
        None => a
            .lu()
            .solve(cross)
            .ok_or_else(|| Error::Degenerate("ridge: normal equations are singular".into())),
    }
}

/// Solves `(XᵀX + λI) W = XᵀY` for `X, Y` of shape samples × channels.
pub fn ridge_fit(x: ArrayView2<f64>, y: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return invalid(format!("ridge: X has {} rows, Y has {}", x.nrows(), y.nrows()));
    }
    let xn = to_na(x);
    let yn = to_na(y);
    let gram = xn.transpose() * &xn;
    let cross = xn.transpose() * yn;
    Ok(to_nd(&solve_normal(&gram, &cross, lambda)?))
}

/// Per-window weights, applied as `Ŷ = X W` with X laid out samples × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeMapModel {
    pub weights: Vec<Array2<f64>>,
    pub windows: Vec<(usize, usize)>,
    pub lambda: f64,
    pub window_spec: WindowSpec,
}

impl RidgeMapModel {
    /// Predictions per window, each channels × window samples.
    pub fn predict_windows(&self, imagined: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let c = self.weights.first().map_or(0, |w| w.nrows());
        let end = self.windows.last().map_or(0, |w| w.1);
        if imagined.nrows() != c || imagined.ncols() < end {
            return invalid(format!(
                "ridge model expects {c} channels and at least {end} samples, got {:?}",
                imagined.dim()
            ));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.windows)
            .map(|(w, &(s0, s1))| w.t().dot(&imagined.slice(s![.., s0..s1])))
            .collect())
    }

    /// Full-length prediction covering `[0, last window end)`.
    pub fn predict(&self, imagined: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(concatenate_windows(&self.predict_windows(imagined)?, &self.windows))
    }
}

/// Each window contributes the samples up to the next window's start; the
/// last window contributes all of its samples.
pub fn concatenate_windows(preds: &[Array2<f64>], windows: &[(usize, usize)]) -> Array2<f64> {
    let c = preds.first().map_or(0, |p| p.nrows());
    let end = windows.last().map_or(0, |w| w.1);
    let mut out = Array2::<f64>::zeros((c, end));
    for (k, (p, &(s0, s1))) in preds.iter().zip(windows).enumerate() {
        let until = windows.get(k + 1).map_or(s1, |w| w.0);
        out.slice_mut(s![.., s0..until]).assign(&p.slice(s![.., ..until - s0]));
    }
    out
}

/// Per-pair, per-window sufficient statistics `X Xᵀ` and `X Yᵀ` in
/// channel-major layout (equal to `XᵀX`, `XᵀY` in samples × channels layout).
struct PairStats {
    gram: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
}

fn pair_stats(x: &Array2<f64>, y: &Array2<f64>, windows: &[(usize, usize)]) -> PairStats {
    let mut gram = Vec::with_capacity(windows.len());
    let mut cross = Vec::with_capacity(windows.len());
    for &(s0, s1) in windows {
        let xw = to_na(x.slice(s![.., s0..s1]));
        let yw = to_na(y.slice(s![.., s0..s1]));
        gram.push(&xw * xw.transpose());
        cross.push(&xw * yw.transpose());
    }
    PairStats { gram, cross }
}

fn summed(stats: &[&PairStats], w: usize, c: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut g = DMatrix::<f64>::zeros(c, c);
    let mut h = DMatrix::<f64>::zeros(c, c);
    for p in stats {
        g += &p.gram[w];
        h += &p.cross[w];
    }
    (g, h)
}

/// Pearson r, or NaN when either side is constant.
fn pearson_or_nan(a: &[f64], b: &[f64]) -> f64 {
    crate::stats::pearson_r(a, b).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Chosen per fold by an inner leave-one-out over the training pairs.
    Nested(&'static [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// Index of the held-out imagined trial in the dataset.
    pub imagined: usize,
    pub stimulus: Stimulus,
    pub lambda: f64,
    /// windows × channels; NaN marks a degenerate window that is left out
    /// of every aggregate.
    pub r: Array2<f64>,
    /// Concatenated held-out prediction, channels × covered samples.
    pub prediction: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LotoResult {
    pub subject_id: String,
    pub windows: Vec<(usize, usize)>,
    pub folds: Vec<FoldResult>,
    /// Target permutation applied before evaluation, if any.
    pub permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RSummary {
    pub mean_r: f64,
    pub sem_r: f64,
    pub n_values: usize,
    pub n_missing: usize,
}

impl LotoResult {
    /// Mean and SEM across all folds, windows and channels.
    pub fn summary(&self) -> Result<RSummary> {
        let mut vals = Vec::new();
        let mut missing = 0usize;
        for f in &self.folds {
            for &v in f.r.iter() {
                if v.is_finite() {
                    vals.push(v);
                } else {
                    missing += 1;
                }
            }
        }
        if vals.is_empty() {
            return Err(Error::Degenerate(format!("{}: every window is degenerate", self.subject_id)));
        }
        let mean_r = crate::stats::mean(&vals).expect("non-empty");
        let sem_r = if vals.len() > 1 { crate::stats::sem(&vals)? } else { 0.0 };
        Ok(RSummary {
            mean_r,
            sem_r,
            n_values: vals.len(),
            n_missing: missing,
        })
    }
}

fn check_pairing(dataset: &SubjectDataset, pairing: &TrialPairing) -> Result<()> {
    for s in Stimulus::ALL {
        let n = pairing.pairs.iter().filter(|p| p.stimulus == s).count();
        if n == 1 {
            return invalid(format!(
                "{}: stimulus {} has a single pair; leave-one-out needs two",
                dataset.subject_id,
                s.as_str()
            ));
        }
    }
    if pairing.len() < 2 {
        return invalid(format!("{}: fewer than two trial pairs", dataset.subject_id));
    }
    for p in &pairing.pairs {
        let t = dataset
            .trials
            .get(p.imagined)
            .ok_or_else(|| Error::Invalid(format!("pair refers to missing trial {}", p.imagined)))?;
        if t.condition.task != Task::Imagine || t.data.dim() != p.target.dim() {
            return invalid(format!(
                "{}: pair for trial {} is not an imagined trial with a matching target",
                dataset.subject_id, p.imagined
            ));
        }
    }
    Ok(())
}

fn fit_weights(stats: &[&PairStats], n_windows: usize, c: usize, lambda: f64) -> Result<Vec<DMatrix<f64>>> {
    (0..n_windows)
        .map(|w| {
            let (g, h) = summed(stats, w, c);
            solve_normal(&g, &h, lambda)
        })
        .collect()
}

/// Mean valid r of held-out predictions for one lambda, inner leave-one-out.
fn inner_score(
    dataset: &SubjectDataset,
    pairing: &TrialPairing,
    train: &[usize],
    stats: &[PairStats],
    windows: &[(usize, usize)],
    c: usize,
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for &q in train {
        let rest: Vec<&PairStats> = train.iter().filter(|&&i| i != q).map(|&i| &stats[i]).collect();
        let Ok(ws) = fit_weights(&rest, windows.len(), c, lambda) else {
            continue;
        };
        let x = &dataset.trials[pairing.pairs[q].imagined].data;
        let y = &pairing.pairs[q].target;
        for (w, &(s0, s1)) in ws.iter().zip(windows) {
            let pred = to_nd(w).t().dot(&x.slice(s![.., s0..s1]));
            for ch in 0..c {
                let r = pearson_or_nan(&pred.row(ch).to_vec(), &y.slice(s![ch, s0..s1]).to_vec());
                if r.is_finite() {
                    total += r;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        f64::NEG_INFINITY
    } else {
        total / n as f64
    }
}

fn run_loto(
    dataset: &SubjectDataset,
    pairing: &TrialPairing,
    spec: &WindowSpec,
    lambda: LambdaChoice,
) -> Result<LotoResult> {
    check_pairing(dataset, pairing)?;
    let (c, t) = pairing.pairs[0].target.dim();
    let windows = sliding_windows(t, spec)?;
    let stats: Vec<PairStats> = pairing
        .pairs
        .par_iter()
        .map(|p| pair_stats(&dataset.trials[p.imagined].data, &p.target, &windows))
        .collect();

    let folds: Vec<FoldResult> = (0..pairing.len())
        .into_par_iter()
        .map(|held| -> Result<FoldResult> {
            let train: Vec<usize> = (0..pairing.len()).filter(|&i| i != held).collect();
            let lam = match lambda {
                LambdaChoice::Fixed(l) => l,
                LambdaChoice::Nested(grid) => {
                    let mut best = (f64::NEG_INFINITY, DEFAULT_LAMBDA);
                    for &l in grid {
                        let score = inner_score(dataset, pairing, &train, &stats, &windows, c, l);
                        if score > best.0 {
                            best = (score, l);
                        }
                    }
                    best.1
                }
            };
            let refs: Vec<&PairStats> = train.iter().map(|&i| &stats[i]).collect();
            let weights: Vec<Array2<f64>> = fit_weights(&refs, windows.len(), c, lam)?.iter().map(to_nd).collect();
            let model = RidgeMapModel {
                weights,
                windows: windows.clone(),
                lambda: lam,
                window_spec: *spec,
            };
            let pair = &pairing.pairs[held];
            let preds = model.predict_windows(&dataset.trials[pair.imagined].data)?;
            let mut r = Array2::<f64>::zeros((windows.len(), c));
            for (k, (p, &(s0, s1))) in preds.iter().zip(&windows).enumerate() {
                for ch in 0..c {
                    r[[k, ch]] = pearson_or_nan(&p.row(ch).to_vec(), &pair.target.slice(s![ch, s0..s1]).to_vec());
                }
            }
            Ok(FoldResult {
                imagined: pair.imagined,
                stimulus: pair.stimulus,
                lambda: lam,
                r,
                prediction: concatenate_windows(&preds, &windows),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LotoResult {
        subject_id: dataset.subject_id.clone(),
        windows,
        folds,
        permutation: None,
    })
}

/// Leave-one-trial-out evaluation with a fixed lambda.
pub fn loto_evaluate(dataset: &SubjectDataset, pairing: &TrialPairing, spec: &WindowSpec, lambda: f64) -> Result<LotoResult> {
    run_loto(dataset, pairing, spec, LambdaChoice::Fixed(lambda))
}

/// Leave-one-trial-out evaluation, fixed or nested lambda.
pub fn loto_evaluate_with(
    dataset: &SubjectDataset,
    pairing: &TrialPairing,
    spec: &WindowSpec,
    lambda: LambdaChoice,
) -> Result<LotoResult> {
    run_loto(dataset, pairing, spec, lambda)
}

/// Same pipeline with the targets reassigned by `perm`.
pub fn null_with_permutation(
    dataset: &SubjectDataset,
    pairing: &TrialPairing,
    spec: &WindowSpec,
    lambda: LambdaChoice,
    perm: &[usize],
) -> Result<LotoResult> {
    let shuffled = pairing.with_permuted_targets(perm)?;
    let mut res = run_loto(dataset, &shuffled, spec, lambda)?;
    res.permutation = Some(perm.to_vec());
    Ok(res)
}

/// Null distribution from a uniformly random target permutation.
pub fn null_shuffled_evaluate(
    dataset: &SubjectDataset,
    pairing: &TrialPairing,
    spec: &WindowSpec,
    lambda: LambdaChoice,
    seed: u64,
) -> Result<LotoResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = random_permutation(pairing.len(), &mut rng);
    null_with_permutation(dataset, pairing, spec, lambda, &perm)
}

/// Fits one model on every pair, for transfer diagnostics.
pub fn fit_ridge_map(pairing: &TrialPairing, dataset: &SubjectDataset, spec: &WindowSpec, lambda: f64) -> Result<RidgeMapModel> {
    check_pairing(dataset, pairing)?;
    let (c, t) = pairing.pairs[0].target.dim();
    let windows = sliding_windows(t, spec)?;
    let stats: Vec<PairStats> = pairing
        .pairs
        .iter()
        .map(|p| pair_stats(&dataset.trials[p.imagined].data, &p.target, &windows))
        .collect();
    let refs: Vec<&PairStats> = stats.iter().collect();
    Ok(RidgeMapModel {
        weights: fit_weights(&refs, windows.len(), c, lambda)?.iter().map(to_nd).collect(),
        windows,
        lambda,
        window_spec: *spec,
    })
}

/// Applies a fitted model to another subject's pairs. Every pair is
/// evaluated; nothing is refit.
pub fn transfer_evaluate(model: &RidgeMapModel, dataset: &SubjectDataset, pairing: &TrialPairing) -> Result<LotoResult> {
    check_pairing(dataset, pairing)?;
    let folds = pairing
        .pairs
        .iter()
        .map(|pair| -> Result<FoldResult> {
            let preds = model.predict_windows(&dataset.trials[pair.imagined].data)?;
            let c = pair.target.nrows();
            let mut r = Array2::<f64>::zeros((model.windows.len(), c));
            for (k, (p, &(s0, s1))) in preds.iter().zip(&model.windows).enumerate() {
                for ch in 0..c {
                    r[[k, ch]] = pearson_or_nan(&p.row(ch).to_vec(), &pair.target.slice(s![ch, s0..s1]).to_vec());
                }
            }
            Ok(FoldResult {
                imagined: pair.imagined,
                stimulus: pair.stimulus,
                lambda: model.lambda,
                r,
                prediction: concatenate_windows(&preds, &model.windows),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LotoResult {
        subject_id: dataset.subject_id.clone(),
        windows: model.windows.clone(),
        folds,
        permutation: None,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct WithinBetween {
    pub within: Vec<f64>,
    pub between: Vec<f64>,
}

/// Channel-mean Pearson r between a prediction and a reference trial,
/// over the prediction's length. Constant channels are skipped.
pub fn channel_mean_r(pred: &Array2<f64>, reference: &Array2<f64>) -> Option<f64> {
    let t = pred.ncols();
    let mut total = 0.0;
    let mut n = 0usize;
    for ch in 0..pred.nrows() {
        let r = pearson_or_nan(&pred.row(ch).to_vec(), &reference.slice(s![ch, ..t]).to_vec());
        if r.is_finite() {
            total += r;
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

/// Correlates every prediction with every reference trial and splits by
/// whether their stimuli agree.
pub fn within_between_from_predictions(
    predictions: &[(Stimulus, &Array2<f64>)],
    references: &[(Stimulus, &Array2<f64>)],
) -> Result<WithinBetween> {
    let mut out = WithinBetween::default();
    for (ps, p) in predictions {
        for (rs, r) in references {
            if r.nrows() != p.nrows() || r.ncols() < p.ncols() {
                return invalid("reference trial is smaller than the prediction");
            }
            if let Some(v) = channel_mean_r(p, r) {
                if ps == rs {
                    out.within.push(v);
                } else {
                    out.between.push(v);
                }
            }
        }
    }
    Ok(out)
}

/// Within/between-class correlations of held-out predictions against every
/// listened trial of the subject.
pub fn within_between_class(dataset: &SubjectDataset, loto: &LotoResult) -> Result<WithinBetween> {
    let listened: Vec<(Stimulus, &Array2<f64>)> = dataset
        .trials
        .iter()
        .filter(|t| t.condition.task == Task::Listen)
        .map(|t| (t.condition.stimulus, &t.data))
        .collect();
    let distinct = Stimulus::ALL
        .iter()
        .filter(|s| listened.iter().any(|(l, _)| l == *s))
        .count();
    if distinct < 2 {
        return invalid(format!("{}: fewer than two listened stimuli", dataset.subject_id));
    }
    let preds: Vec<(Stimulus, &Array2<f64>)> = loto.folds.iter().map(|f| (f.stimulus, &f.prediction)).collect();
    within_between_from_predictions(&preds, &listened)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[lo, hi]`; values outside are clamped into the
/// end bins.
pub fn histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Vec<HistogramBin> {
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|k| HistogramBin {
            lo: lo + k as f64 * width,
            hi: lo + (k + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values.iter().filter(|v| v.is_finite()) {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(n_bins - 1);
        bins[k].count += 1;
    }
    bins
}
