//! Synthetic data through disk, preprocessing and both analyses.

use std::collections::BTreeMap;
use std::path::Path;

use imago_core::preprocess::{preprocess_subject, PreprocessConfig};
use imago_core::ridgemap::{loto_evaluate, null_shuffled_evaluate, LambdaChoice, WindowSpec};
use imago_core::rsa::{correlation_classify, trial_similarity, CHANCE_LEVEL};
use imago_core::synth::{generate_dataset, load_ground_truth, save_ground_truth, SynthConfig};
use imago_core::{build_pairing, load_dataset, save_dataset, PairingMode, Task};

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn config() -> SynthConfig {
    SynthConfig {
        n_subjects: 2,
        duration_s: 8.0,
        n_repetitions: 5,
        seed: 17,
        ..SynthConfig::default()
    }
}

#[test]
fn disk_round_trip_is_f32_exact_and_stable() {
    let cfg = config();
    let (ds, truth) = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    save_ground_truth(&truth, &cfg, dir.path()).unwrap();

    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in ds.iter().zip(&loaded) {
        assert_eq!(a.subject_id, b.subject_id);
        assert_eq!(a.trials.len(), b.trials.len());
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.condition, tb.condition);
            assert!(ta.data.iter().zip(&tb.data).all(|(x, y)| *x as f32 as f64 == *y));
        }
    }
    // a second save of loaded data reproduces every file byte for byte
    let again = tempfile::tempdir().unwrap();
    save_dataset(&loaded, again.path()).unwrap();
    let first = files(dir.path());
    assert!(first.len() > 1);
    for (rel, bytes) in &first {
        if !rel.starts_with("ground_truth") {
            assert_eq!(Some(bytes), files(again.path()).get(rel), "{rel}");
        }
    }

    let (truth2, cfg2) = load_ground_truth(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(truth2, truth);
}

#[test]
fn preprocessed_data_keeps_the_condition_structure() {
    let (ds, _) = generate_dataset(&config()).unwrap();
    for d in &ds {
        let p = preprocess_subject(d, &PreprocessConfig::default()).unwrap();
        let names: Vec<&str> = p.report.stages.iter().map(|s| s.split('(').next().unwrap()).collect();
        assert_eq!(names, ["screen", "bandpass", "dss", "zscore"]);
        assert_eq!(p.dataset.trials.len(), d.trials.len());
        let sim = trial_similarity(&p.dataset).unwrap();
        assert_eq!(sim.values.nrows(), d.trials.len());
        let c = correlation_classify(&p.dataset).unwrap();
        assert!(c.accuracy > 2.0 * CHANCE_LEVEL, "{}: accuracy {}", d.subject_id, c.accuracy);
    }
}

#[test]
fn ridge_beats_its_shuffled_null_after_preprocessing() {
    let (ds, _) = generate_dataset(&config()).unwrap();
    let spec = WindowSpec::default_for(100.0).unwrap();
    for d in &ds {
        let p = preprocess_subject(d, &PreprocessConfig::default()).unwrap().dataset;
        let pairing = build_pairing(&p, PairingMode::AveragedTarget).unwrap();
        let imagined = p.trials.iter().filter(|t| t.condition.task == Task::Imagine).count();
        assert_eq!(pairing.len(), imagined);
        let real = loto_evaluate(&p, &pairing, &spec, 1.0).unwrap().summary().unwrap();
        let null = null_shuffled_evaluate(&p, &pairing, &spec, LambdaChoice::Fixed(1.0), 3)
            .unwrap()
            .summary()
            .unwrap();
        assert!(real.mean_r > null.mean_r + 0.1, "{real:?} vs {null:?}");
    }
}
