//! Training, calibration and LOSO on small synthetic sets.

use imago_core::preprocess::{preprocess_subject, PreprocessConfig};
use imago_core::synth::{generate_dataset, SynthConfig};
use imago_core::{PairingMode, SubjectDataset, TrialPairing};
use imago_nnet::loso::{build_pairings, evaluate_loso_with};
use imago_nnet::{
    fit_calibration, split_calibration, train_backbone, ArchSpec, Example, LossWeights, LosoConfig, NullPlan,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_set(n_subjects: usize) -> Vec<SubjectDataset> {
    let cfg = SynthConfig {
        n_subjects,
        n_channels: 6,
        latent_dim: 3,
        duration_s: 6.0,
        n_repetitions: 4,
        seed: 2,
        ..SynthConfig::default()
    };
    let pre = PreprocessConfig {
        dss: imago_core::preprocess::DssSettings {
            n_keep: 4,
            ..Default::default()
        },
        ..PreprocessConfig::default()
    };
    generate_dataset(&cfg)
        .unwrap()
        .0
        .iter()
        .map(|d| preprocess_subject(d, &pre).unwrap().dataset)
        .collect()
}

fn examples<'a>(ds: &'a [SubjectDataset], pairings: &'a [TrialPairing], subjects: &[usize]) -> Vec<Example<'a>> {
    subjects
        .iter()
        .flat_map(|&s| {
            pairings[s].pairs.iter().map(move |p| Example {
                subject: s,
                stimulus: p.stimulus,
                input: &ds[s].trials[p.imagined].data,
                target: &p.target,
            })
        })
        .collect()
}

fn arch() -> ArchSpec {
    ArchSpec {
        widths: vec![6, 4],
        ..ArchSpec::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 6,
        patience: 3,
        val_fraction: 0.25,
        calibration_fraction: 0.25,
        calibration_epochs: 40,
        ..TrainConfig::default()
    }
}

#[test]
fn training_lowers_validation_loss_and_calibration_never_hurts() {
    let ds = small_set(3);
    let pairings = build_pairings(&ds, PairingMode::AveragedTarget).unwrap();
    let train = examples(&ds, &pairings, &[0, 1]);
    let cfg = train_cfg();
    let weights = LossWeights::default();
    let fit = train_backbone(&train, 6, &arch(), &cfg, &weights).unwrap();
    let initial = fit.log[0].val.total;
    let best = fit.log[fit.best_epoch].val.total;
    assert!(best < initial, "best {best} vs untrained {initial}");
    assert!(fit.train_idx.iter().all(|i| !fit.val_idx.contains(i)));

    let held = examples(&ds, &pairings, &[2]);
    let stimuli: Vec<_> = held.iter().map(|e| e.stimulus).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (cal, eval) = split_calibration(&stimuli, cfg.calibration_fraction, &mut rng).unwrap();
    let c = fit_calibration(&fit.model, &held, &cal, &eval, &cfg, &weights).unwrap();
    assert!(c.final_loss <= c.initial_loss);
}

#[test]
fn loso_is_deterministic_and_identity_null_matches_true() {
    let ds = small_set(3);
    let cfg = LosoConfig {
        arch: arch(),
        train: TrainConfig {
            max_epochs: 2,
            calibration_epochs: 5,
            ..train_cfg()
        },
        ..LosoConfig::default()
    };
    let pairings = build_pairings(&ds, cfg.pairing).unwrap();
    let plan = NullPlan::random(&pairings, 4);
    let a = evaluate_loso_with(&ds, &pairings, &cfg, &plan).unwrap();
    let b = evaluate_loso_with(&ds, &pairings, &cfg, &plan).unwrap();
    let scores = |r: &imago_nnet::LosoReport| -> Vec<(f64, f64)> { r.folds.iter().map(|f| (f.r_true, f.r_null)).collect() };
    assert_eq!(scores(&a), scores(&b));
    assert_eq!(a.report.subjects.len(), 3);

    let same = evaluate_loso_with(&ds, &pairings, &cfg, &NullPlan::identity(&pairings)).unwrap();
    for f in &same.folds {
        assert_eq!(f.r_true, f.r_null);
    }
}
