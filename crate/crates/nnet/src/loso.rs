//! Leave-one-subject-out evaluation with a matched shuffled-null pipeline.
//!
//! For each held-out subject the backbone is trained on every other subject,
//! calibrated on a subset of the held-out pairs and scored on the rest. The
//! null repeats the whole procedure after permuting which target each
//! imagined trial is paired with and, independently per pair, the channel
//! order of the target. Both pipelines use the same seeds and the same
//! calibration/evaluation split, and both are scored against the true
//! evaluation targets.

use imago_core::ridgemap::channel_mean_r;
use imago_core::stats::{EvalReport, PairedSample};
use imago_core::synth::random_permutation;
use imago_core::{build_pairing, PairingMode, SubjectDataset, TrialPairing};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{fit_calibration, predict, split_calibration};
use crate::conv::Conv1d;
use crate::error::{NnError, Result};
use crate::loss::LossWeights;
use crate::model::{ArchSpec, EncoderDecoder};
use crate::train::{train_backbone, EpochLog, Example, TrainConfig, TrainedBackbone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LosoConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub pairing: PairingMode,
    pub null_seed: u64,
}

/// Permutations that turn true pairs into null pairs: per subject, the
/// target reassignment and, per pair, the target's channel order
/// (`null[row r] = target[row channel_perm[r]]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullPlan {
    pub target_perms: Vec<Vec<usize>>,
    pub channel_perms: Vec<Vec<Vec<usize>>>,
}

impl NullPlan {
    pub fn identity(pairings: &[TrialPairing]) -> Self {
        NullPlan {
            target_perms: pairings.iter().map(|p| (0..p.len()).collect()).collect(),
            channel_perms: pairings
                .iter()
                .map(|p| p.pairs.iter().map(|pair| (0..pair.target.nrows()).collect()).collect())
                .collect(),
        }
    }

    pub fn random(pairings: &[TrialPairing], seed: u64) -> Self {
        let mut target_perms = Vec::new();
        let mut channel_perms = Vec::new();
        for (s, p) in pairings.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64 + 1);
            target_perms.push(random_permutation(p.len(), &mut rng));
            channel_perms.push(
                p.pairs
                    .iter()
                    .map(|pair| random_permutation(pair.target.nrows(), &mut rng))
                    .collect(),
            );
        }
        NullPlan {
            target_perms,
            channel_perms,
        }
    }

    fn null_targets(&self, pairings: &[TrialPairing]) -> Result<Vec<Vec<Array2<f64>>>> {
        pairings
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let moved = p.with_permuted_targets(&self.target_perms[s])?;
                Ok(moved
                    .pairs
                    .iter()
                    .zip(&self.channel_perms[s])
                    .map(|(pair, perm)| pair.target.select(Axis(0), perm))
                    .collect())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Mean channel r of the uncalibrated backbone on its training pairs.
    pub train_r: f64,
    pub val_r: f64,
    pub calibration_initial_loss: f64,
    pub calibration_final_loss: f64,
    pub r_eval: f64,
    #[serde(skip)]
    pub log: Vec<EpochLog>,
    #[serde(skip)]
    pub backbone: EncoderDecoder,
    #[serde(skip)]
    pub calibration: Conv1d,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldOutcome {
    pub subject_id: String,
    pub held_out: usize,
    pub r_true: f64,
    pub r_null: f64,
    pub calibration_idx: Vec<usize>,
    pub evaluation_idx: Vec<usize>,
    pub training_subjects: Vec<String>,
    pub true_fit: FitSummary,
    pub null_fit: FitSummary,
}

#[derive(Debug, Clone)]
pub struct LosoReport {
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
}

/// Mean over pairs of the channel-mean Pearson r between prediction and
/// target.
pub fn mean_pair_r(
    backbone: &EncoderDecoder,
    calibration: Option<&Conv1d>,
    examples: &[Example],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &i in idx {
        let pred = predict(backbone, calibration, examples[i].input)?;
        if let Some(r) = channel_mean_r(&pred, examples[i].target) {
            total += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(NnError::Core(imago_core::Error::Degenerate("no scorable pair".into())));
    }
    Ok(total / n as f64)
}

fn examples_for<'a>(
    datasets: &'a [SubjectDataset],
    pairings: &'a [TrialPairing],
    targets: &'a [Vec<Array2<f64>>],
    subjects: &[usize],
) -> Vec<Example<'a>> {
    let mut out = Vec::new();
    for &s in subjects {
        for (pair, target) in pairings[s].pairs.iter().zip(&targets[s]) {
            out.push(Example {
                subject: s,
                stimulus: pair.stimulus,
                input: &datasets[s].trials[pair.imagined].data,
                target,
            });
        }
    }
    out
}

pub fn fold_config(cfg: &LosoConfig, held_out: usize) -> TrainConfig {
    TrainConfig {
        seed: cfg.train.seed.wrapping_add(held_out as u64),
        ..cfg.train.clone()
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_pipeline(
    datasets: &[SubjectDataset],
    pairings: &[TrialPairing],
    train_targets: &[Vec<Array2<f64>>],
    held_out: usize,
    cal_idx: &[usize],
    eval_idx: &[usize],
    true_targets: &[Vec<Array2<f64>>],
    cfg: &LosoConfig,
) -> Result<FitSummary> {
    let others: Vec<usize> = (0..datasets.len()).filter(|&s| s != held_out).collect();
    let train_examples = examples_for(datasets, pairings, train_targets, &others);
    let tcfg = fold_config(cfg, held_out);
    let channels = datasets[held_out].n_channels();
    let TrainedBackbone {
        model,
        log,
        best_epoch,
        stopped_epoch,
        train_idx,
        val_idx,
    } = train_backbone(&train_examples, channels, &cfg.arch, &tcfg, &cfg.loss)?;
    let train_r = mean_pair_r(&model, None, &train_examples, &train_idx)?;
    let val_r = mean_pair_r(&model, None, &train_examples, &val_idx)?;

    let held_examples = examples_for(datasets, pairings, train_targets, &[held_out]);
    let cal = fit_calibration(&model, &held_examples, cal_idx, eval_idx, &tcfg, &cfg.loss)?;
    let eval_examples = examples_for(datasets, pairings, true_targets, &[held_out]);
    let r_eval = mean_pair_r(&model, Some(&cal.layer), &eval_examples, eval_idx)?;
    Ok(FitSummary {
        best_epoch,
        stopped_epoch,
        train_r,
        val_r,
        calibration_initial_loss: cal.initial_loss,
        calibration_final_loss: cal.final_loss,
        r_eval,
        log,
        backbone: model,
        calibration: cal.layer,
    })
}

pub fn build_pairings(datasets: &[SubjectDataset], mode: PairingMode) -> Result<Vec<TrialPairing>> {
    datasets
        .iter()
        .map(|d| build_pairing(d, mode).map_err(NnError::from))
        .collect()
}

/// Runs one held-out fold under the given null plan.
pub fn run_fold(
    datasets: &[SubjectDataset],
    pairings: &[TrialPairing],
    held_out: usize,
    cfg: &LosoConfig,
    plan: &NullPlan,
) -> Result<FoldOutcome> {
    if datasets.len() < 3 {
        return Err(NnError::Invalid("leave-one-subject-out needs at least three subjects".into()));
    }
    let c = datasets[0].n_channels();
    if datasets.iter().any(|d| d.n_channels() != c) {
        return Err(NnError::Invalid("subjects differ in channel count".into()));
    }
    let true_targets: Vec<Vec<Array2<f64>>> =
        pairings.iter().map(|p| p.pairs.iter().map(|x| x.target.clone()).collect()).collect();
    let null_targets = plan.null_targets(pairings)?;

    let stimuli: Vec<_> = pairings[held_out].pairs.iter().map(|p| p.stimulus).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(fold_config(cfg, held_out).seed);
    split_rng.set_stream(3);
    let (cal_idx, eval_idx) = split_calibration(&stimuli, cfg.train.calibration_fraction, &mut split_rng)?;

    let true_fit = fit_pipeline(datasets, pairings, &true_targets, held_out, &cal_idx, &eval_idx, &true_targets, cfg)?;
    let null_fit = fit_pipeline(datasets, pairings, &null_targets, held_out, &cal_idx, &eval_idx, &true_targets, cfg)?;
    Ok(FoldOutcome {
        subject_id: datasets[held_out].subject_id.clone(),
        held_out,
        r_true: true_fit.r_eval,
        r_null: null_fit.r_eval,
        calibration_idx: cal_idx,
        evaluation_idx: eval_idx,
        training_subjects: datasets
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != held_out)
            .map(|(_, d)| d.subject_id.clone())
            .collect(),
        true_fit,
        null_fit,
    })
}

/// Every subject in turn is held out; folds run in parallel and are
/// returned in subject order.
pub fn evaluate_loso(datasets: &[SubjectDataset], cfg: &LosoConfig) -> Result<LosoReport> {
    let pairings = build_pairings(datasets, cfg.pairing)?;
    let plan = NullPlan::random(&pairings, cfg.null_seed);
    evaluate_loso_with(datasets, &pairings, cfg, &plan)
}

pub fn evaluate_loso_with(
    datasets: &[SubjectDataset],
    pairings: &[TrialPairing],
    cfg: &LosoConfig,
    plan: &NullPlan,
) -> Result<LosoReport> {
    let folds: Vec<FoldOutcome> = (0..datasets.len())
        .into_par_iter()
        .map(|h| {
            let out = run_fold(datasets, pairings, h, cfg, plan);
            if let Ok(f) = &out {
                log::info!("{}: r_true {:.4} r_null {:.4}", f.subject_id, f.r_true, f.r_null);
            }
            out
        })
        .collect::<Result<_>>()?;
    let paired = PairedSample::new(
        folds.iter().map(|f| f.subject_id.clone()).collect(),
        folds.iter().map(|f| f.r_true).collect(),
        folds.iter().map(|f| f.r_null).collect(),
    )?;
    Ok(LosoReport {
        report: EvalReport::from_correlations(&paired)?,
        folds,
    })
}
