use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imago_cli::manifest::{inventory, read_manifest};
use imago_core::load_dataset;

const TINY: &str = r#"
[synth]
n_subjects = 3
n_channels = 4
duration_s = 4.0
n_repetitions = 3
latent_dim = 2
seed = 5

[preprocess.dss]
n_keep = 2

[cnn.arch]
widths = [3]

[cnn.train]
max_epochs = 2
calibration_epochs = 3
val_fraction = 0.34
calibration_fraction = 0.34
"#;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("out");
        let path = tmp.path().join("imago.toml");
        fs::write(&path, config).unwrap();
        Workspace {
            _tmp: tmp,
            root,
            config: path,
        }
    }

    fn imago(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_imago"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .env("IMAGO_OUT", &self.root)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.imago(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run_pipeline(&self) {
        for cmd in ["synth", "preprocess", "rsa", "ridge", "cnn-train", "cnn-eval", "report"] {
            self.ok(&[cmd]);
        }
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn exit_codes() {
    let ws = Workspace::new("[synth]\nn_subject = 3\n");
    assert_eq!(code(&ws.imago(&["synth"])), 2);

    let ws = Workspace::new(TINY);
    assert_eq!(code(&ws.imago(&["preprocess"])), 2, "missing upstream");
    assert_eq!(code(&ws.imago(&["report"])), 2, "nothing to report");
    assert_eq!(code(&ws.imago(&["synth", "--bogus"])), 2);
    assert_eq!(code(&ws.imago(&["synth", "--jobs", "2"])), 0);
}

#[test]
fn synth_seed_force_and_output_override() {
    let a = Workspace::new(TINY);
    let b = Workspace::new(TINY);
    a.ok(&["synth", "--seed", "7"]);
    b.ok(&["synth", "--seed", "7"]);
    let ma = read_manifest(&a.stage("synth")).unwrap();
    let mb = read_manifest(&b.stage("synth")).unwrap();
    assert_eq!(ma.output_fingerprint, mb.output_fingerprint);
    assert_eq!(ma.seeds, vec![("synth".to_string(), 7)]);

    assert_eq!(code(&a.imago(&["synth", "--seed", "8"])), 2, "non-empty output without --force");
    a.ok(&["synth", "--seed", "8", "--force"]);
    assert_ne!(read_manifest(&a.stage("synth")).unwrap().output_fingerprint, ma.output_fingerprint);
}

#[test]
fn default_synth_writes_eleven_subjects_of_eighty_trials() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    let ds = load_dataset(ws.stage("synth")).unwrap();
    assert_eq!(ds.len(), 11);
    assert!(ds.iter().all(|d| d.trials.len() == 80 && d.n_channels() == 16));
}

#[test]
fn preprocess_records_rate_and_dss() {
    let ws = Workspace::new(
        "[synth]\nn_subjects = 2\nn_channels = 8\nduration_s = 3.0\nsample_rate_hz = 1000.0\nn_repetitions = 3\n\n[preprocess]\ndecimate_factor = 10\n",
    );
    ws.ok(&["synth"]);
    ws.ok(&["preprocess"]);
    let ds = load_dataset(ws.stage("preprocessed")).unwrap();
    assert_eq!(ds[0].sample_rate_hz(), Some(100.0));
    let m = read_manifest(&ws.stage("preprocessed")).unwrap();
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["screen", "bandpass", "dss", "zscore", "decimate"]);
    assert_eq!(m.stages[2].params["n_keep"], 7);
    assert!(m.input_fingerprint.is_some());
}

#[test]
fn decimating_an_already_decimated_set_warns_and_honors_the_factor() {
    let ws = Workspace::new(&format!("{TINY}\n[preprocess]\ndecimate_factor = 10\nfilter = {{ high_hz = 4.0 }}\n"));
    ws.ok(&["synth"]);
    let out = ws.imago(&["preprocess"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("WARN"));
    let ds = load_dataset(ws.stage("preprocessed")).unwrap();
    assert_eq!(ds[0].sample_rate_hz(), Some(10.0));
    let report = fs::read_to_string(ws.stage("preprocessed").join("reports/sub01.json")).unwrap();
    assert!(report.contains("\"decimate_factor\": 10"));
}

#[test]
fn stage_outputs_and_manifests() {
    let ws = Workspace::new(TINY);
    ws.run_pipeline();

    let confusion = read_rows(&ws.stage("rsa").join("confusion_matrix.csv"));
    assert_eq!(confusion.len(), 8);
    for row in &confusion {
        let sum: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 100.0).abs() < 1e-9, "{row:?}");
    }

    let ridge = ws.stage("ridge");
    for f in ["real_summary.json", "null_summary.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ridge.join(f)).unwrap()).unwrap();
        assert_eq!(v["subjects"].as_array().unwrap().len(), 3);
    }

    let paired = read_rows(&ws.stage("report").join("cnn_paired.csv"));
    assert_eq!(paired.len(), 3);
    assert!(paired.iter().all(|r| r.len() == 5));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.stage("report").join("summary.json")).unwrap()).unwrap();
    let p = summary["cnn"]["wilcoxon"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    for stage in ["synth", "preprocessed", "rsa", "ridge", "cnn", "cnn_eval", "report"] {
        let dir = ws.stage(stage);
        let m = read_manifest(&dir).unwrap();
        assert_eq!(m.files, inventory(&dir).unwrap(), "{stage}");
        assert!(!m.files.is_empty());
    }
}

#[test]
fn cnn_eval_reproduces_training_scores_and_checks_config() {
    let ws = Workspace::new(TINY);
    for cmd in ["synth", "preprocess", "cnn-train", "cnn-eval"] {
        ws.ok(&[cmd]);
    }
    let folds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.stage("cnn").join("folds.json")).unwrap()).unwrap();
    let scores = read_rows(&ws.stage("cnn_eval").join("scores.csv"));
    for (f, row) in folds.as_array().unwrap().iter().zip(&scores) {
        assert_eq!(f["subject_id"].as_str().unwrap(), row[0]);
        assert_eq!(f["r_true"].as_f64().unwrap(), row[1].parse::<f64>().unwrap());
        assert_eq!(f["r_null"].as_f64().unwrap(), row[2].parse::<f64>().unwrap());
    }

    fs::write(&ws.config, format!("{TINY}\n[cnn.loss]\nalpha = 2.0\n")).unwrap();
    let out = ws.imago(&["cnn-eval", "--force"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn config_command_prints_parseable_defaults() {
    let ws = Workspace::new("");
    let out = ws.imago(&["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = imago_cli::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, imago_cli::ExperimentConfig::default());
}

#[test]
fn cnn_stages_use_channels_common_to_all_subjects() {
    let ws = Workspace::new(TINY);
    ws.ok(&["synth"]);
    ws.ok(&["preprocess"]);
    let mut ds = load_dataset(ws.stage("preprocessed")).unwrap();
    ds[1] = ds[1].select_channels(&[0, 2, 3]);
    let uneven = ws.root.join("uneven");
    imago_core::save_dataset(&ds, &uneven).unwrap();

    let out = ws.imago(&["cnn-train", "--input", uneven.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("common to all subjects"));
    let m = read_manifest(&ws.stage("cnn")).unwrap();
    let channels = &m.stages.iter().find(|s| s.name == "channels").unwrap().params;
    assert_eq!(channels.as_array().unwrap().len(), 3);
    ws.ok(&["cnn-eval"]);
    assert_eq!(read_rows(&ws.stage("cnn_eval").join("scores.csv")).len(), 3);
}
