//! Per-subject channel mixing fitted on top of a frozen backbone.

use imago_core::Stimulus;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::conv::Conv1d;
use crate::error::{NnError, Result};
use crate::loss::{Loss, LossWeights};
use crate::model::EncoderDecoder;
use crate::tensor::Tensor3;
use crate::train::{Example, TrainConfig};

#[derive(Debug, Clone)]
pub struct CalibrationFit {
    /// Kernel-size-1 conv: `mixing[o, i] = weight[(o, i, 0)]`.
    pub layer: Conv1d,
    pub calibration_idx: Vec<usize>,
    pub evaluation_idx: Vec<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl CalibrationFit {
    pub fn mixing(&self) -> Array2<f64> {
        let c = self.layer.out_channels();
        Array2::from_shape_vec((c, c), self.layer.weight.data.clone()).expect("square kernel-1 conv")
    }
}

/// Picks `round(n · fraction)` calibration pairs (clamped to `[1, n − 1]`),
/// drawing stimuli in round-robin order so every stimulus is represented
/// as evenly as possible. The rest are evaluation pairs.
pub fn split_calibration(stimuli: &[Stimulus], fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = stimuli.len();
    if n < 2 {
        return Err(NnError::Invalid(format!("{n} pairs cannot be split into calibration and evaluation")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NnError::Invalid("calibration_fraction must lie in (0, 1)".into()));
    }
    let n_cal = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut groups: Vec<Vec<usize>> = Stimulus::ALL
        .iter()
        .map(|&s| (0..n).filter(|&i| stimuli[i] == s).collect())
        .collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    let mut order = Vec::with_capacity(n);
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for g in &groups {
            if let Some(&i) = g.get(k) {
                order.push(i);
            }
        }
    }
    let mut cal = order[..n_cal].to_vec();
    let mut eval = order[n_cal..].to_vec();
    cal.sort_unstable();
    eval.sort_unstable();
    Ok((cal, eval))
}

/// Fits the calibration layer on `examples[calibration_idx]` with the
/// backbone frozen in evaluation mode. The returned layer has the lowest
/// calibration loss seen, so it never does worse than the identity start.
pub fn fit_calibration(
    backbone: &EncoderDecoder,
    examples: &[Example],
    calibration_idx: &[usize],
    evaluation_idx: &[usize],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<CalibrationFit> {
    if calibration_idx.is_empty() || evaluation_idx.is_empty() {
        return Err(NnError::Invalid("calibration needs both calibration and evaluation pairs".into()));
    }
    if calibration_idx.iter().any(|i| evaluation_idx.contains(i)) {
        return Err(NnError::Invalid("calibration and evaluation pairs overlap".into()));
    }
    let inputs: Vec<&Array2<f64>> = calibration_idx.iter().map(|&i| examples[i].input).collect();
    let targets: Vec<&Array2<f64>> = calibration_idx.iter().map(|&i| examples[i].target).collect();
    let features = backbone.predict(&Tensor3::stack(&inputs)?)?;
    let target = Tensor3::stack(&targets)?;

    let mut layer = Conv1d::identity(backbone.channels);
    let mut loss = Loss::new(*weights)?;
    let mut opt = Adam::new(cfg.calibration_adam());
    let initial_loss = loss.terms(&layer.apply(&features)?, &target)?.total;
    let mut best = (initial_loss, layer.clone());
    for _ in 0..cfg.calibration_epochs {
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let pred = layer.forward(&features, true)?;
        let (terms, grad) = loss.terms_and_grad(&pred, &target)?;
        if terms.total < best.0 {
            best = (terms.total, layer.clone());
        }
        layer.backward(&grad)?;
        opt.step(&mut layer.params_mut())?;
    }
    let last = loss.terms(&layer.apply(&features)?, &target)?.total;
    if last < best.0 {
        best = (last, layer);
    }
    let (final_loss, mut layer) = best;
    layer.clear_cache();
    Ok(CalibrationFit {
        layer,
        calibration_idx: calibration_idx.to_vec(),
        evaluation_idx: evaluation_idx.to_vec(),
        initial_loss,
        final_loss,
    })
}

/// Backbone followed by an optional calibration layer.
pub fn predict(backbone: &EncoderDecoder, calibration: Option<&Conv1d>, input: &Array2<f64>) -> Result<Array2<f64>> {
    let x = Tensor3::stack(&[input])?;
    let mut y = backbone.predict(&x)?;
    if let Some(c) = calibration {
        y = c.apply(&y)?;
    }
    Ok(y.unstack().remove(0))
}
