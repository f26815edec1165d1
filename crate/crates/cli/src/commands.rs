//! One function per pipeline stage. Each reads its upstream directory,
//! writes into its own stage directory under the output root and finishes
//! with a run manifest.

use std::path::{Path, PathBuf};

use imago_core::preprocess::preprocess_subject;
use imago_core::ridgemap::{
    histogram, loto_evaluate_with, null_shuffled_evaluate, within_between_class, LotoResult, RSummary,
};
use imago_core::rsa::{average_similarity, block_average, classify_similarity, trial_similarity, CHANCE_LEVEL};
use imago_core::stats::{binomial_upper_p, fisher_z, mean, rank_sum_greater, sem, EvalReport, PairedSample};
use imago_core::synth::{generate_dataset, save_ground_truth};
use imago_core::{load_dataset, save_dataset, ConditionLabel, SubjectDataset};
use imago_nnet::calibrate::predict;
use imago_nnet::checkpoint::{load_checkpoint, save_checkpoint};
use imago_nnet::loso::{build_pairings, evaluate_loso_with, mean_pair_r, LosoConfig};
use imago_nnet::train::log_to_csv;
use imago_nnet::{Example, NullPlan};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{hash_of, ExperimentConfig};
use crate::error::{validation, CliError, Result};
use crate::manifest::{dir_fingerprint, read_manifest, ManifestBuilder, RunManifest};
use crate::output::{check_out, parse_f64, prepare_out, read_csv, read_json, require_dir, write_json, write_text, Csv};

pub const SYNTH_DIR: &str = "synth";
pub const PREPROCESSED_DIR: &str = "preprocessed";
pub const RSA_DIR: &str = "rsa";
pub const RIDGE_DIR: &str = "ridge";
pub const CNN_DIR: &str = "cnn";
pub const CNN_EVAL_DIR: &str = "cnn_eval";
pub const REPORT_DIR: &str = "report";

pub const PAIRED_HEADER: [&str; 5] = ["subject_id", "r_true", "r_null", "z_true", "z_null"];

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: ExperimentConfig,
    pub force: bool,
    /// Upstream directory; defaults to the usual stage below the output root.
    pub input: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(config: ExperimentConfig) -> Self {
        RunOptions {
            config,
            force: false,
            input: None,
        }
    }

    pub fn stage_dir(&self, name: &str) -> PathBuf {
        self.config.output_root().join(name)
    }

    fn input_or(&self, default: &str) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.stage_dir(default))
    }
}

fn load_input(dir: &Path) -> Result<Vec<SubjectDataset>> {
    require_dir(dir, "input dataset")?;
    let ds = load_dataset(dir)?;
    if ds.is_empty() {
        return validation(format!("{} holds no subjects", dir.display()));
    }
    Ok(ds)
}

/// Restricts every subject to the channels all of them kept after screening,
/// in the first subject's order. The CNN stages share weights across subjects
/// and need one channel layout.
fn common_channels(ds: Vec<SubjectDataset>) -> Result<(Vec<SubjectDataset>, Vec<String>)> {
    let names: Vec<String> = ds[0]
        .channel_names
        .iter()
        .filter(|n| ds.iter().all(|d| d.channel_names.contains(n)))
        .cloned()
        .collect();
    if names.is_empty() {
        return validation("subjects share no channels after screening");
    }
    if ds.iter().all(|d| d.channel_names == names) {
        return Ok((ds, names));
    }
    log::warn!("training on the {} channels common to all subjects", names.len());
    let ds = ds
        .iter()
        .map(|d| {
            let keep: Vec<usize> = names
                .iter()
                .map(|n| d.channel_names.iter().position(|m| m == n).expect("common channel"))
                .collect();
            d.select_channels(&keep)
        })
        .collect();
    Ok((ds, names))
}

fn sample_rate(ds: &[SubjectDataset]) -> Result<f64> {
    let fs = ds[0]
        .sample_rate_hz()
        .ok_or_else(|| CliError::Validation("dataset has no trials".into()))?;
    if ds.iter().any(|d| d.sample_rate_hz() != Some(fs)) {
        return validation("subjects differ in sample rate");
    }
    Ok(fs)
}

pub fn cmd_synth(opts: &RunOptions) -> Result<RunManifest> {
    let cfg = &opts.config;
    let out = opts.stage_dir(SYNTH_DIR);
    let (datasets, truth) = generate_dataset(&cfg.synth)?;
    prepare_out(&out, opts.force)?;
    save_dataset(&datasets, &out)?;
    save_ground_truth(&truth, &cfg.synth, &out)?;
    let mut m = ManifestBuilder::new("synth", hash_of(&cfg.synth)).seed("synth", cfg.synth.seed);
    m.stage("synth", &cfg.synth);
    m.finish(&out)
}

#[derive(Serialize)]
struct StageParams<'a, T: Serialize> {
    enabled: bool,
    #[serde(flatten)]
    params: &'a T,
}

pub fn cmd_preprocess(opts: &RunOptions) -> Result<RunManifest> {
    let cfg = &opts.config.preprocess;
    let input = opts.input_or(SYNTH_DIR);
    let out = opts.stage_dir(PREPROCESSED_DIR);
    let datasets = load_input(&input)?;
    let results = datasets
        .par_iter()
        .map(|d| preprocess_subject(d, cfg))
        .collect::<imago_core::Result<Vec<_>>>()?;
    prepare_out(&out, opts.force)?;

    let processed: Vec<SubjectDataset> = results.iter().map(|p| p.dataset.clone()).collect();
    save_dataset(&processed, &out)?;
    let mut summary = Csv::new(&[
        "subject_id",
        "removed_channels",
        "input_rate_hz",
        "output_rate_hz",
        "decimate_factor",
        "n_warnings",
    ]);
    for p in &results {
        for w in &p.report.warnings {
            log::warn!("{}: {w}", p.report.subject_id);
        }
        write_json(&out, &format!("reports/{}.json", p.report.subject_id), &p.report)?;
        if let Some(model) = &p.dss {
            model.save(&out.join("dss"), &p.report.subject_id)?;
        }
        summary.row(&[
            &p.report.subject_id,
            &p.report.removed_channels.join(";"),
            &p.report.input_rate_hz,
            &p.report.output_rate_hz,
            &p.report.decimate_factor,
            &p.report.warnings.len(),
        ]);
    }
    write_text(&out, "preprocess_summary.csv", &summary.into_string())?;

    let mut m = ManifestBuilder::new("preprocess", hash_of(cfg));
    m.input(&input)?;
    m.stage(
        "screen",
        &serde_json::json!({ "z_threshold": cfg.screen_z_threshold }),
    );
    m.stage("bandpass", &cfg.filter);
    m.stage("dss", &cfg.dss);
    m.stage("zscore", &StageParams { enabled: cfg.zscore, params: &serde_json::json!({}) });
    m.stage(
        "decimate",
        &serde_json::json!({
            "decimate_factor": cfg.decimate_factor,
            "target_rate_hz": cfg.target_rate_hz,
            "applied_factors": results.iter().map(|p| p.report.decimate_factor).collect::<Vec<_>>(),
        }),
    );
    m.finish(&out)
}

fn label_header(first: &str, labels: &[ConditionLabel]) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(labels.iter().map(|l| l.to_string()))
        .collect()
}

fn matrix_csv(first: &str, row_labels: &[String], col_labels: &[ConditionLabel], values: &Array2<f64>) -> String {
    let header = label_header(first, col_labels);
    let mut text = header.join(",") + "\n";
    for (label, row) in row_labels.iter().zip(values.rows()) {
        let cells: Vec<String> = std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string())).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text
}

#[derive(Serialize)]
struct RsaSummary {
    n_subjects: usize,
    n_trials: u64,
    n_correct: u64,
    accuracy: f64,
    chance: f64,
    binomial_p: f64,
    mean_similarity_within: f64,
    mean_similarity_between: f64,
}

pub fn cmd_rsa(opts: &RunOptions) -> Result<RunManifest> {
    let input = opts.input_or(PREPROCESSED_DIR);
    let out = opts.stage_dir(RSA_DIR);
    let datasets = load_input(&input)?;
    let per_subject = datasets
        .par_iter()
        .map(|d| -> imago_core::Result<_> {
            let sim = trial_similarity(d)?;
            let class = classify_similarity(&sim)?;
            Ok((sim, class))
        })
        .collect::<imago_core::Result<Vec<_>>>()?;
    prepare_out(&out, opts.force)?;

    let mut table = Csv::new(&["subject_id", "n_trials", "n_correct", "accuracy", "binomial_p"]);
    let mut counts = [[0u64; 8]; 8];
    for (d, (_, class)) in datasets.iter().zip(&per_subject) {
        let n = class.confusion.total();
        let correct: u64 = (0..8).map(|i| class.confusion.counts[i][i]).sum();
        table.row(&[&d.subject_id, &n, &correct, &class.accuracy, &binomial_upper_p(correct, n, CHANCE_LEVEL)?]);
        for (i, row) in class.confusion.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                counts[i][j] += c;
            }
        }
    }
    write_text(&out, "classification.csv", &table.into_string())?;

    let pooled = imago_core::rsa::ConfusionMatrix { counts };
    let labels = ConditionLabel::all();
    let names: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    let pct = pooled.percentages();
    let pct = Array2::from_shape_fn((8, 8), |(i, j)| pct[i][j]);
    let cnt = Array2::from_shape_fn((8, 8), |(i, j)| counts[i][j] as f64);
    write_text(&out, "confusion_matrix.csv", &matrix_csv("true\\predicted", &names, &labels, &pct))?;
    write_text(&out, "confusion_counts.csv", &matrix_csv("true\\predicted", &names, &labels, &cnt))?;

    let sims: Vec<_> = per_subject.iter().map(|(s, _)| s.clone()).collect();
    let mean_sim = average_similarity(&sims)?;
    let trial_names: Vec<String> = mean_sim.labels.iter().map(|l| l.to_string()).collect();
    write_text(&out, "similarity_mean.csv", &matrix_csv("trial", &trial_names, &mean_sim.labels, &mean_sim.values))?;
    let blocks = block_average(&mean_sim)?;
    let block_names: Vec<String> = blocks.conditions.iter().map(|l| l.to_string()).collect();
    write_text(&out, "similarity_blocks.csv", &matrix_csv("condition", &block_names, &blocks.conditions, &blocks.values))?;

    let n_trials = pooled.total();
    let n_correct: u64 = (0..8).map(|i| counts[i][i]).sum();
    let (within, between) = imago_core::rsa::within_between_means(&mean_sim);
    write_json(
        &out,
        "rsa_summary.json",
        &RsaSummary {
            n_subjects: datasets.len(),
            n_trials,
            n_correct,
            accuracy: n_correct as f64 / n_trials as f64,
            chance: CHANCE_LEVEL,
            binomial_p: binomial_upper_p(n_correct, n_trials, CHANCE_LEVEL)?,
            mean_similarity_within: within,
            mean_similarity_between: between,
        },
    )?;

    let mut m = ManifestBuilder::new("rsa", hash_of(&()));
    m.input(&input)?;
    m.stage("rsa", &serde_json::json!({ "similarity": "per-channel pearson, channel mean", "classifier": "nearest mean similarity, self excluded" }));
    m.finish(&out)
}

#[derive(Serialize)]
struct SubjectR {
    subject_id: String,
    #[serde(flatten)]
    summary: RSummary,
}

#[derive(Serialize)]
struct RidgeAggregate<'a> {
    kind: &'a str,
    window_ms: f64,
    step_ms: f64,
    lambda: Option<f64>,
    nested_lambda: bool,
    null_seed: Option<u64>,
    subjects: Vec<SubjectR>,
    mean_r: f64,
    sem_r: Option<f64>,
}

/// Per-window mean r over folds and channels, ignoring missing values.
fn window_course(res: &LotoResult) -> Vec<f64> {
    (0..res.windows.len())
        .map(|k| {
            let vals: Vec<f64> = res
                .folds
                .iter()
                .flat_map(|f| f.r.row(k).to_vec())
                .filter(|v| v.is_finite())
                .collect();
            mean(&vals).unwrap_or(f64::NAN)
        })
        .collect()
}

fn fold_mean(r: &Array2<f64>) -> f64 {
    let vals: Vec<f64> = r.iter().copied().filter(|v| v.is_finite()).collect();
    mean(&vals).unwrap_or(f64::NAN)
}

pub fn cmd_ridge(opts: &RunOptions) -> Result<RunManifest> {
    let rc = &opts.config.ridge;
    let input = opts.input_or(PREPROCESSED_DIR);
    let out = opts.stage_dir(RIDGE_DIR);
    let datasets = load_input(&input)?;
    let spec = rc.window_spec(sample_rate(&datasets)?)?;
    let lambda = rc.lambda_choice();
    let results = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| -> imago_core::Result<_> {
            let pairing = imago_core::build_pairing(d, rc.pairing)?;
            let real = loto_evaluate_with(d, &pairing, &spec, lambda)?;
            let null = null_shuffled_evaluate(d, &pairing, &spec, lambda, rc.null_seed.wrapping_add(i as u64))?;
            let wb = within_between_class(d, &real)?;
            Ok((real, null, wb))
        })
        .collect::<imago_core::Result<Vec<_>>>()?;
    prepare_out(&out, opts.force)?;

    let mut scores = Csv::new(&["subject_id", "r_real", "sem_real", "missing_real", "r_null", "sem_null", "missing_null"]);
    let mut folds = Csv::new(&["subject_id", "imagined_trial", "stimulus", "lambda", "r_real", "r_null"]);
    let mut course = Csv::new(&["subject_id", "window_start_s", "r_real", "r_null"]);
    let mut wb_csv = Csv::new(&["subject_id", "kind", "r"]);
    let mut wb_tests = Csv::new(&["subject_id", "n_within", "n_between", "mean_within", "mean_between", "rank_sum_p"]);
    let mut real_subjects = Vec::new();
    let mut null_subjects = Vec::new();
    let (mut all_within, mut all_between) = (Vec::new(), Vec::new());
    for (d, (real, null, wb)) in datasets.iter().zip(&results) {
        let (rs, ns) = (real.summary()?, null.summary()?);
        scores.row(&[&d.subject_id, &rs.mean_r, &rs.sem_r, &rs.n_missing, &ns.mean_r, &ns.sem_r, &ns.n_missing]);
        for (fr, fnull) in real.folds.iter().zip(&null.folds) {
            folds.row(&[&d.subject_id, &fr.imagined, &fr.stimulus.as_str(), &fr.lambda, &fold_mean(&fr.r), &fold_mean(&fnull.r)]);
        }
        for ((&(start, _), a), b) in real.windows.iter().zip(window_course(real)).zip(window_course(null)) {
            course.row(&[&d.subject_id, &(start as f64 / spec.sample_rate_hz), &a, &b]);
        }
        for v in &wb.within {
            wb_csv.row(&[&d.subject_id, &"within", v]);
        }
        for v in &wb.between {
            wb_csv.row(&[&d.subject_id, &"between", v]);
        }
        wb_tests.row(&[
            &d.subject_id,
            &wb.within.len(),
            &wb.between.len(),
            &mean(&wb.within).unwrap_or(f64::NAN),
            &mean(&wb.between).unwrap_or(f64::NAN),
            &rank_sum_greater(&wb.within, &wb.between)?,
        ]);
        all_within.extend_from_slice(&wb.within);
        all_between.extend_from_slice(&wb.between);
        real_subjects.push(SubjectR { subject_id: d.subject_id.clone(), summary: rs });
        null_subjects.push(SubjectR { subject_id: d.subject_id.clone(), summary: ns });
    }
    wb_tests.row(&[
        &"pooled",
        &all_within.len(),
        &all_between.len(),
        &mean(&all_within).unwrap_or(f64::NAN),
        &mean(&all_between).unwrap_or(f64::NAN),
        &rank_sum_greater(&all_within, &all_between)?,
    ]);
    write_text(&out, "subject_scores.csv", &scores.into_string())?;
    write_text(&out, "fold_scores.csv", &folds.into_string())?;
    write_text(&out, "time_course.csv", &course.into_string())?;
    write_text(&out, "within_between.csv", &wb_csv.into_string())?;
    write_text(&out, "within_between_tests.csv", &wb_tests.into_string())?;

    let fixed = match lambda {
        imago_core::ridgemap::LambdaChoice::Fixed(l) => Some(l),
        imago_core::ridgemap::LambdaChoice::Nested(_) => None,
    };
    let aggregate = |kind, subjects: Vec<SubjectR>, seed| {
        let means: Vec<f64> = subjects.iter().map(|s| s.summary.mean_r).collect();
        RidgeAggregate {
            kind,
            window_ms: rc.window_ms,
            step_ms: rc.step_ms,
            lambda: fixed,
            nested_lambda: rc.nested,
            null_seed: seed,
            mean_r: mean(&means).unwrap_or(f64::NAN),
            sem_r: sem(&means).ok(),
            subjects,
        }
    };
    let paired = PairedSample::new(
        real_subjects.iter().map(|s| s.subject_id.clone()).collect(),
        real_subjects.iter().map(|s| s.summary.mean_r).collect(),
        null_subjects.iter().map(|s| s.summary.mean_r).collect(),
    )?;
    write_json(&out, "real_summary.json", &aggregate("real", real_subjects, None))?;
    write_json(&out, "null_summary.json", &aggregate("null", null_subjects, Some(rc.null_seed)))?;
    write_json(&out, "paired_report.json", &EvalReport::from_correlations(&paired)?)?;

    let mut m = ManifestBuilder::new("ridge", hash_of(rc)).seed("ridge_null", rc.null_seed);
    m.input(&input)?;
    m.stage("ridge", rc);
    m.finish(&out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CnnRunConfig {
    config_hash: String,
    config: LosoConfig,
}

/// The subset of a training fold record that evaluation needs.
#[derive(Debug, Clone, Deserialize)]
struct FoldRecord {
    subject_id: String,
    held_out: usize,
    evaluation_idx: Vec<usize>,
}

fn checkpoint_name(subject: &str, kind: &str) -> String {
    format!("{subject}_{kind}")
}

pub fn cmd_cnn_train(opts: &RunOptions) -> Result<RunManifest> {
    let cfg = &opts.config.cnn;
    let hash = hash_of(cfg);
    let input = opts.input_or(PREPROCESSED_DIR);
    let out = opts.stage_dir(CNN_DIR);
    let (datasets, channels) = common_channels(load_input(&input)?)?;
    let pairings = build_pairings(&datasets, cfg.pairing)?;
    let plan = NullPlan::random(&pairings, cfg.null_seed);
    check_out(&out, opts.force)?;
    let report = evaluate_loso_with(&datasets, &pairings, cfg, &plan)?;
    prepare_out(&out, opts.force)?;

    let ckpt = out.join("checkpoints");
    for f in &report.folds {
        for (kind, fit) in [("true", &f.true_fit), ("null", &f.null_fit)] {
            let name = checkpoint_name(&f.subject_id, kind);
            save_checkpoint(&ckpt, &name, &fit.backbone, Some(&fit.calibration), &hash)?;
            write_text(&out, &format!("logs/{name}.csv"), &log_to_csv(&fit.log))?;
        }
    }
    write_json(&out, "folds.json", &report.folds)?;
    write_json(&out, "null_plan.json", &plan)?;
    write_json(&out, "cnn_config.json", &CnnRunConfig { config_hash: hash.clone(), config: cfg.clone() })?;
    write_json(&out, "training_report.json", &report.report)?;

    let mut m = ManifestBuilder::new("cnn-train", hash)
        .seed("train", cfg.train.seed)
        .seed("null", cfg.null_seed);
    m.input(&input)?;
    m.stage("channels", &channels);
    m.stage("cnn", cfg);
    m.finish(&out)
}

pub fn cmd_cnn_eval(opts: &RunOptions) -> Result<RunManifest> {
    let cnn_dir = opts.input_or(CNN_DIR);
    let out = opts.stage_dir(CNN_EVAL_DIR);
    require_dir(&cnn_dir, "cnn-train output")?;
    let run: CnnRunConfig = read_json(&cnn_dir.join("cnn_config.json"))?;
    let expected = hash_of(&opts.config.cnn);
    if run.config_hash != expected {
        return validation(format!(
            "cnn config hash {} in {} does not match the current config ({expected})",
            run.config_hash,
            cnn_dir.display()
        ));
    }
    let train_manifest = read_manifest(&cnn_dir)?;
    let data_dir = train_manifest
        .input_dir
        .clone()
        .ok_or_else(|| CliError::Validation("cnn-train manifest does not name its input".into()))?;
    if train_manifest.input_fingerprint.as_deref() != Some(dir_fingerprint(&data_dir)?.as_str()) {
        return validation(format!("{} changed since cnn-train ran", data_dir.display()));
    }
    let (datasets, _) = common_channels(load_input(&data_dir)?)?;
    let pairings = build_pairings(&datasets, run.config.pairing)?;
    let folds: Vec<FoldRecord> = read_json(&cnn_dir.join("folds.json"))?;

    let scored = folds
        .par_iter()
        .map(|f| -> Result<_> {
            if f.held_out >= datasets.len() || datasets[f.held_out].subject_id != f.subject_id {
                return validation(format!("fold {} does not match the dataset", f.subject_id));
            }
            let d = &datasets[f.held_out];
            let examples: Vec<Example> = pairings[f.held_out]
                .pairs
                .iter()
                .map(|p| Example {
                    subject: f.held_out,
                    stimulus: p.stimulus,
                    input: &d.trials[p.imagined].data,
                    target: &p.target,
                })
                .collect();
            let mut per_kind = Vec::new();
            for kind in ["true", "null"] {
                let (backbone, cal, header) = load_checkpoint(&cnn_dir.join("checkpoints"), &checkpoint_name(&f.subject_id, kind))?;
                if header.config_hash != run.config_hash {
                    return validation(format!("checkpoint {}_{kind} comes from another config", f.subject_id));
                }
                let r = mean_pair_r(&backbone, cal.as_ref(), &examples, &f.evaluation_idx)?;
                let pairs = f
                    .evaluation_idx
                    .iter()
                    .map(|&i| -> Result<f64> {
                        let pred = predict(&backbone, cal.as_ref(), examples[i].input)?;
                        Ok(imago_core::ridgemap::channel_mean_r(&pred, examples[i].target).unwrap_or(f64::NAN))
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_kind.push((r, pairs));
            }
            let (r_null, null_pairs) = per_kind.pop().expect("two kinds");
            let (r_true, true_pairs) = per_kind.pop().expect("two kinds");
            let stimuli: Vec<&str> = f.evaluation_idx.iter().map(|&i| examples[i].stimulus.as_str()).collect();
            Ok((f.subject_id.clone(), r_true, r_null, f.evaluation_idx.clone(), stimuli, true_pairs, null_pairs))
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_out(&out, opts.force)?;

    let mut table = Csv::new(&PAIRED_HEADER);
    let mut pair_table = Csv::new(&["subject_id", "pair", "stimulus", "r_true", "r_null"]);
    for (sid, rt, rn, idx, stimuli, tp, np) in &scored {
        table.row(&[sid, rt, rn, &fisher_z(*rt)?, &fisher_z(*rn)?]);
        for k in 0..idx.len() {
            pair_table.row(&[sid, &idx[k], &stimuli[k], &tp[k], &np[k]]);
        }
    }
    write_text(&out, "scores.csv", &table.into_string())?;
    write_text(&out, "pair_scores.csv", &pair_table.into_string())?;
    let paired = PairedSample::new(
        scored.iter().map(|s| s.0.clone()).collect(),
        scored.iter().map(|s| s.1).collect(),
        scored.iter().map(|s| s.2).collect(),
    )?;
    write_json(&out, "eval_report.json", &EvalReport::from_correlations(&paired)?)?;

    let mut m = ManifestBuilder::new("cnn-eval", run.config_hash.clone());
    m.input(&cnn_dir)?;
    m.stage("cnn-eval", &serde_json::json!({ "dataset": data_dir, "metric": "mean over evaluation pairs of channel-mean pearson r" }));
    m.finish(&out)
}

#[derive(Serialize)]
struct FigureSpec {
    name: &'static str,
    kind: &'static str,
    file: &'static str,
    description: &'static str,
}

#[derive(Serialize, Default)]
struct ReportSummary {
    rsa_accuracy: Option<f64>,
    rsa_binomial_p: Option<f64>,
    ridge: Option<EvalReport>,
    within_between_p: Option<f64>,
    cnn: Option<EvalReport>,
}

fn paired_csv(report: &EvalReport) -> String {
    let mut t = Csv::new(&PAIRED_HEADER);
    for s in &report.subjects {
        t.row(&[&s.subject_id, &s.r_true, &s.r_null, &s.z_true, &s.z_null]);
    }
    t.into_string()
}

fn histogram_csv(columns: &[(&str, &[f64])], bins: usize, range: (f64, f64)) -> String {
    let mut header = vec!["bin_lo", "bin_hi"];
    header.extend(columns.iter().map(|c| c.0));
    let mut t = Csv::new(&header);
    let hists: Vec<_> = columns.iter().map(|c| histogram(c.1, bins, range.0, range.1)).collect();
    for k in 0..bins {
        let mut row: Vec<&dyn std::fmt::Display> = vec![&hists[0][k].lo, &hists[0][k].hi];
        for h in &hists {
            row.push(&h[k].count);
        }
        t.row(&row);
    }
    t.into_string()
}

pub fn cmd_report(opts: &RunOptions) -> Result<RunManifest> {
    let rc = &opts.config.report;
    let root = opts.config.output_root();
    let out = opts.stage_dir(REPORT_DIR);
    let (rsa, ridge, cnn) = (root.join(RSA_DIR), root.join(RIDGE_DIR), root.join(CNN_EVAL_DIR));
    if !rsa.is_dir() && !ridge.is_dir() && !cnn.is_dir() {
        return validation(format!("no rsa, ridge or cnn-eval results under {}", root.display()));
    }
    let mut summary = ReportSummary::default();
    let mut figures = Vec::new();
    let mut files: Vec<(String, String)> = Vec::new();
    let mut inputs = Vec::new();

    if rsa.is_dir() {
        #[derive(Deserialize)]
        struct Rsa {
            accuracy: f64,
            binomial_p: f64,
        }
        let s: Rsa = read_json(&rsa.join("rsa_summary.json"))?;
        summary.rsa_accuracy = Some(s.accuracy);
        summary.rsa_binomial_p = Some(s.binomial_p);
        for (name, file) in [("confusion_matrix.csv", "confusion_matrix.csv"), ("similarity_blocks.csv", "similarity_blocks.csv"), ("similarity_mean.csv", "similarity_mean.csv")] {
            let text = std::fs::read_to_string(rsa.join(file)).map_err(|e| CliError::io(rsa.join(file), e))?;
            files.push((name.to_string(), text));
        }
        figures.push(FigureSpec { name: "trial_similarity", kind: "heatmap", file: "similarity_mean.csv", description: "subject-averaged trial-by-trial similarity" });
        figures.push(FigureSpec { name: "condition_similarity", kind: "heatmap", file: "similarity_blocks.csv", description: "condition-block averages of the similarity matrix" });
        figures.push(FigureSpec { name: "confusion", kind: "heatmap", file: "confusion_matrix.csv", description: "classifier confusion, row percentages" });
        inputs.push(("rsa", rsa.clone()));
    }

    if ridge.is_dir() {
        let report: EvalReport = read_json(&ridge.join("paired_report.json"))?;
        files.push(("ridge_paired.csv".into(), paired_csv(&report)));
        summary.ridge = Some(report);

        let path = ridge.join("fold_scores.csv");
        let rows = read_csv(&path, &["subject_id", "imagined_trial", "stimulus", "lambda", "r_real", "r_null"])?;
        let real: Vec<f64> = rows.iter().map(|r| parse_f64(&r[4], &path)).collect::<Result<_>>()?;
        let null: Vec<f64> = rows.iter().map(|r| parse_f64(&r[5], &path)).collect::<Result<_>>()?;
        files.push(("ridge_r_histogram.csv".into(), histogram_csv(&[("real", &real), ("null", &null)], rc.histogram_bins, rc.histogram_range)));

        let path = ridge.join("within_between.csv");
        let rows = read_csv(&path, &["subject_id", "kind", "r"])?;
        let (mut within, mut between) = (Vec::new(), Vec::new());
        for r in &rows {
            let v = parse_f64(&r[2], &path)?;
            match r[1].as_str() {
                "within" => within.push(v),
                "between" => between.push(v),
                other => return validation(format!("{}: unknown kind {other:?}", path.display())),
            }
        }
        summary.within_between_p = Some(rank_sum_greater(&within, &between)?);
        files.push(("within_between_histogram.csv".into(), histogram_csv(&[("within", &within), ("between", &between)], rc.histogram_bins, rc.histogram_range)));
        let course = std::fs::read_to_string(ridge.join("time_course.csv")).map_err(|e| CliError::io(ridge.join("time_course.csv"), e))?;
        files.push(("ridge_time_course.csv".into(), course));

        figures.push(FigureSpec { name: "ridge_paired", kind: "paired", file: "ridge_paired.csv", description: "per-subject ridge r, real vs shuffled targets" });
        figures.push(FigureSpec { name: "ridge_r_distribution", kind: "histogram", file: "ridge_r_histogram.csv", description: "held-out trial r, real vs shuffled targets" });
        figures.push(FigureSpec { name: "ridge_time_course", kind: "line", file: "ridge_time_course.csv", description: "window-resolved ridge r" });
        figures.push(FigureSpec { name: "within_between", kind: "histogram", file: "within_between_histogram.csv", description: "prediction vs listened trials, same vs different stimulus" });
        inputs.push(("ridge", ridge.clone()));
    }

    if cnn.is_dir() {
        let report: EvalReport = read_json(&cnn.join("eval_report.json"))?;
        files.push(("cnn_paired.csv".into(), paired_csv(&report)));
        summary.cnn = Some(report);
        figures.push(FigureSpec { name: "cnn_paired", kind: "paired", file: "cnn_paired.csv", description: "per held-out subject CNN r, true vs null training" });
        inputs.push(("cnn_eval", cnn.clone()));
    }

    prepare_out(&out, opts.force)?;
    for (name, text) in &files {
        write_text(&out, name, text)?;
    }
    write_json(&out, "summary.json", &summary)?;
    write_json(&out, "figures.json", &figures)?;

    let mut m = ManifestBuilder::new("report", hash_of(rc));
    let fingerprints = inputs
        .iter()
        .map(|(name, dir)| Ok((name.to_string(), dir_fingerprint(dir)?)))
        .collect::<Result<Vec<_>>>()?;
    m.stage("report", &serde_json::json!({ "params": rc, "inputs": fingerprints }));
    m.finish(&out)
}
