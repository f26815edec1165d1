//! Dataset model and the on-disk interchange format.
//!
//! A dataset directory holds `manifest.json` plus one raw file per trial.
//! Raw files are 32-bit little-endian IEEE-754 floats in channel-major
//! order (all samples of channel 0, then channel 1, ...). Samples are held
//! as `f64` in memory and narrowed to `f32` on save, so a dataset that came
//! from disk round-trips bit-exactly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stimulus {
    Melody1,
    Melody2,
    Poem1,
    Poem2,
}

impl Stimulus {
    pub const ALL: [Stimulus; 4] = [
        Stimulus::Melody1,
        Stimulus::Melody2,
        Stimulus::Poem1,
        Stimulus::Poem2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stimulus::Melody1 => "melody1",
            Stimulus::Melody2 => "melody2",
            Stimulus::Poem1 => "poem1",
            Stimulus::Poem2 => "poem2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Listen,
    Imagine,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Listen => "listen",
            Task::Imagine => "imagine",
        }
    }
}

/// One of the eight (stimulus, task) conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub stimulus: Stimulus,
    pub task: Task,
}

impl ConditionLabel {
    pub const COUNT: usize = 8;

    pub fn new(stimulus: Stimulus, task: Task) -> Self {
        ConditionLabel { stimulus, task }
    }

    /// Block index used for similarity matrices and confusion tables:
    /// stimulus-major, listen before imagine.
    pub fn index(self) -> usize {
        self.stimulus.index() * 2 + self.task as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        let stimulus = *Stimulus::ALL.get(i / 2)?;
        let task = if i % 2 == 0 { Task::Listen } else { Task::Imagine };
        Some(ConditionLabel { stimulus, task })
    }

    pub fn all() -> [ConditionLabel; 8] {
        std::array::from_fn(|i| ConditionLabel::from_index(i).unwrap())
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.stimulus.as_str(), self.task.as_str())
    }
}

/// One multichannel response, `channels × samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub subject_id: String,
    pub condition: ConditionLabel,
    pub repetition: u32,
    pub sample_rate_hz: f64,
    pub data: Array2<f64>,
}

impl TrialRecord {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub trials: Vec<TrialRecord>,
    pub channel_names: Vec<String>,
}

impl SubjectDataset {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Sample count shared by all trials, if the dataset is non-empty.
    pub fn n_samples(&self) -> Option<usize> {
        self.trials.first().map(TrialRecord::n_samples)
    }

    pub fn sample_rate_hz(&self) -> Option<f64> {
        self.trials.first().map(|t| t.sample_rate_hz)
    }

    pub fn trials_with(&self, condition: ConditionLabel) -> impl Iterator<Item = (usize, &TrialRecord)> {
        self.trials
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.condition == condition)
    }

    /// Checks the dataset invariants: shared channel count, finite samples,
    /// unique (condition, repetition) keys.
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return invalid("empty subject id");
        }
        let c = self.n_channels();
        if c == 0 {
            return invalid(format!("subject {} has no channels", self.subject_id));
        }
        let mut seen = HashSet::new();
        for t in &self.trials {
            if t.subject_id != self.subject_id {
                return invalid(format!(
                    "trial labelled {} inside dataset {}",
                    t.subject_id, self.subject_id
                ));
            }
            if t.n_channels() != c {
                return invalid(format!(
                    "subject {}: trial {} rep {} has {} channels, expected {}",
                    self.subject_id,
                    t.condition,
                    t.repetition,
                    t.n_channels(),
                    c
                ));
            }
            if !(t.sample_rate_hz.is_finite() && t.sample_rate_hz > 0.0) {
                return invalid(format!("non-positive sample rate {}", t.sample_rate_hz));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{}/{}/r{}",
                    t.subject_id, t.condition, t.repetition
                )));
            }
            if !seen.insert((t.condition, t.repetition)) {
                return Err(Error::DuplicateTrial {
                    subject: self.subject_id.clone(),
                    condition: t.condition.to_string(),
                    repetition: t.repetition,
                });
            }
        }
        Ok(())
    }

    /// Same dataset restricted to the given channel rows, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> SubjectDataset {
        SubjectDataset {
            subject_id: self.subject_id.clone(),
            channel_names: keep.iter().map(|&i| self.channel_names[i].clone()).collect(),
            trials: self
                .trials
                .iter()
                .map(|t| TrialRecord {
                    data: t.data.select(Axis(0), keep),
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn map_trials(&self, mut f: impl FnMut(&TrialRecord) -> Result<TrialRecord>) -> Result<SubjectDataset> {
        Ok(SubjectDataset {
            subject_id: self.subject_id.clone(),
            channel_names: self.channel_names.clone(),
            trials: self.trials.iter().map(&mut f).collect::<Result<_>>()?,
        })
    }
}

pub fn default_channel_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("MEG{:03}", i)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(default)]
    subjects: Vec<SubjectEntry>,
    trials: Vec<TrialEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    subject_id: String,
    channel_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialEntry {
    subject_id: String,
    condition: ConditionLabel,
    repetition: u32,
    sample_rate_hz: f64,
    channels: usize,
    samples: usize,
    file: String,
}

fn read_raw(path: &Path, channels: usize, samples: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = channels * samples;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::ShapeMismatch {
            file: path.display().to_string(),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(Array2::from_shape_vec((channels, samples), values).expect("length checked above"))
}

fn encode_raw(data: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for row in data.rows() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Loads every subject listed in `dir/manifest.json`, validating shapes,
/// finiteness and key uniqueness. Subjects come back in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SubjectDataset>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return invalid(format!(
            "unsupported manifest format_version {}",
            manifest.format_version
        ));
    }

    let matrices: Vec<Array2<f64>> = manifest
        .trials
        .par_iter()
        .map(|t| read_raw(&dir.join(&t.file), t.channels, t.samples))
        .collect::<Result<_>>()?;

    let mut order: Vec<String> = manifest.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let mut by_subject: BTreeMap<String, SubjectDataset> = manifest
        .subjects
        .into_iter()
        .map(|s| {
            (
                s.subject_id.clone(),
                SubjectDataset {
                    subject_id: s.subject_id,
                    trials: Vec::new(),
                    channel_names: s.channel_names,
                },
            )
        })
        .collect();

    for (entry, data) in manifest.trials.into_iter().zip(matrices) {
        let ds = by_subject.entry(entry.subject_id.clone()).or_insert_with(|| {
            order.push(entry.subject_id.clone());
            SubjectDataset {
                subject_id: entry.subject_id.clone(),
                trials: Vec::new(),
                channel_names: default_channel_names(entry.channels),
            }
        });
        ds.trials.push(TrialRecord {
            subject_id: entry.subject_id,
            condition: entry.condition,
            repetition: entry.repetition,
            sample_rate_hz: entry.sample_rate_hz,
            data,
        });
    }

    let datasets: Vec<SubjectDataset> = order
        .into_iter()
        .map(|id| by_subject.remove(&id).expect("every ordered id was inserted"))
        .collect();
    for ds in &datasets {
        ds.validate()?;
    }
    Ok(datasets)
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return invalid(format!("subject id {id:?} is not a safe file name"));
    }
    Ok(())
}

/// Writes `datasets` under `dir` (created if needed). Output is a pure
/// function of the datasets, so repeated saves are byte-identical.
pub fn save_dataset(datasets: &[SubjectDataset], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut subjects = Vec::with_capacity(datasets.len());
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for ds in datasets {
        ds.validate()?;
        check_id(&ds.subject_id)?;
        if !seen.insert(ds.subject_id.as_str()) {
            return invalid(format!("subject {} appears twice", ds.subject_id));
        }
        let sub_dir = dir.join("raw").join(&ds.subject_id);
        fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        subjects.push(SubjectEntry {
            subject_id: ds.subject_id.clone(),
            channel_names: ds.channel_names.clone(),
        });
        for t in &ds.trials {
            let file = format!("raw/{}/{}_r{:03}.f32", ds.subject_id, t.condition, t.repetition);
            let path = dir.join(&file);
            fs::write(&path, encode_raw(&t.data)).map_err(|e| Error::io(&path, e))?;
            entries.push(TrialEntry {
                subject_id: ds.subject_id.clone(),
                condition: t.condition,
                repetition: t.repetition,
                sample_rate_hz: t.sample_rate_hz,
                channels: t.n_channels(),
                samples: t.n_samples(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        subjects,
        trials: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `m` row-major as little-endian `f64` (audit sidecars).
pub fn write_f64_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::ShapeMismatch {
            file: path.display().to_string(),
            expected: rows * cols,
            found: bytes.len() / 8,
        });
    }
    let vals = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("length checked"))
}

/// Rounds every sample to the nearest `f32`, matching what a save/load cycle
/// would produce.
pub fn quantize_to_storage(data: &mut Array2<f64>) {
    data.mapv_inplace(|v| v as f32 as f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Target is the listened trial with the same stimulus and repetition.
    PairedByRepetition,
    /// Target is the mean of all listened trials of the stimulus.
    #[default]
    AveragedTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPair {
    /// Index of the imagined trial in `SubjectDataset::trials`.
    pub imagined: usize,
    pub stimulus: Stimulus,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPairing {
    pub mode: PairingMode,
    pub pairs: Vec<TrialPair>,
}

impl TrialPairing {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reassigns targets: pair `i` receives the target of pair `perm[i]`.
    /// Stimulus labels follow the imagined trial, not the moved target.
    pub fn with_permuted_targets(&self, perm: &[usize]) -> Result<TrialPairing> {
        if perm.len() != self.pairs.len() || !is_permutation(perm) {
            return invalid("target permutation does not match pairing size");
        }
        Ok(TrialPairing {
            mode: self.mode,
            pairs: self
                .pairs
                .iter()
                .zip(perm)
                .map(|(p, &j)| TrialPair {
                    target: self.pairs[j].target.clone(),
                    ..p.clone()
                })
                .collect(),
        })
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

/// Pairs every imagined trial with a listened target.
pub fn build_pairing(dataset: &SubjectDataset, mode: PairingMode) -> Result<TrialPairing> {
    let mut pairs = Vec::new();
    for stimulus in Stimulus::ALL {
        let imagined: Vec<(usize, &TrialRecord)> = dataset
            .trials_with(ConditionLabel::new(stimulus, Task::Imagine))
            .collect();
        if imagined.is_empty() {
            continue;
        }
        let listened: Vec<&TrialRecord> = dataset
            .trials_with(ConditionLabel::new(stimulus, Task::Listen))
            .map(|(_, t)| t)
            .collect();
        if listened.is_empty() {
            return invalid(format!(
                "subject {}: stimulus {} has imagined trials but no listened trials",
                dataset.subject_id,
                stimulus.as_str()
            ));
        }
        let shape = imagined[0].1.data.dim();
        if let Some(t) = imagined
            .iter()
            .map(|(_, t)| *t)
            .chain(listened.iter().copied())
            .find(|t| t.data.dim() != shape)
        {
            return invalid(format!(
                "subject {}: trial {} rep {} has shape {:?}, expected {:?}",
                dataset.subject_id,
                t.condition,
                t.repetition,
                t.data.dim(),
                shape
            ));
        }

        match mode {
            PairingMode::PairedByRepetition => {
                for (idx, im) in imagined {
                    let target = listened
                        .iter()
                        .find(|l| l.repetition == im.repetition)
                        .ok_or_else(|| {
                            Error::Invalid(format!(
                                "subject {}: imagined {} repetition {} has no listened counterpart",
                                dataset.subject_id,
                                stimulus.as_str(),
                                im.repetition
                            ))
                        })?;
                    pairs.push(TrialPair {
                        imagined: idx,
                        stimulus,
                        target: target.data.clone(),
                    });
                }
            }
            PairingMode::AveragedTarget => {
                // Summed in repetition order so the mean does not depend on
                // the order trials were stored in.
                let mut sorted = listened.clone();
                sorted.sort_by_key(|t| t.repetition);
                let mut mean = Array2::<f64>::zeros(shape);
                for l in &sorted {
                    mean += &l.data;
                }
                mean /= sorted.len() as f64;
                for (idx, _) in imagined {
                    pairs.push(TrialPair {
                        imagined: idx,
                        stimulus,
                        target: mean.clone(),
                    });
                }
            }
        }
    }
    pairs.sort_by_key(|p| p.imagined);
    Ok(TrialPairing { mode, pairs })
}
