//! Denoising source separation with a trial-averaging bias.
//!
//! The baseline covariance pools all single trials; the biased covariance
//! pools the per-condition averages (weighted by repetition count). After
//! PCA whitening of the baseline, the eigenvectors of the whitened biased
//! covariance rank components by the fraction of their power that is
//! reproduced across repetitions. The top components are projected back to
//! sensor space.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{read_f64_matrix, write_f64_matrix, ConditionLabel, SubjectDataset, TrialRecord};
use crate::error::{invalid, Error, Result};
use crate::linalg::{sorted_symmetric_eigen, to_na, to_nd};

pub const DEFAULT_N_KEEP: usize = 7;
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DssModel {
    /// `K × C` PCA whitening of the baseline covariance.
    pub whitener: Array2<f64>,
    /// `K × K`, columns are components in whitened space, best first.
    pub rotations: Array2<f64>,
    pub n_keep: usize,
    /// Evoked-to-total power ratio per component, non-increasing.
    pub consistency_scores: Vec<f64>,
    /// `n_keep × C`
    pub unmixer: Array2<f64>,
    /// `C × n_keep`
    pub remixer: Array2<f64>,
}

fn centered(x: &Array2<f64>) -> Array2<f64> {
    let means: Array1<f64> = x.mean_axis(Axis(1)).expect("non-empty trial");
    x - &means.insert_axis(Axis(1))
}

fn outer_sum(acc: &mut DMatrix<f64>, x: &Array2<f64>, weight: f64) {
    let m = to_na(x.view());
    acc.gemm(weight, &m, &m.transpose(), 1.0);
}

/// Fits DSS on trials grouped by condition. Groups with fewer than two
/// repetitions contribute to the baseline only.
pub fn fit_dss(groups: &[Vec<&Array2<f64>>], n_keep: usize, rank_tolerance: f64) -> Result<DssModel> {
    let first = groups
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Invalid("fit_dss: no trials".into()))?;
    let c = first.nrows();
    if groups.iter().flatten().any(|t| t.nrows() != c) {
        return invalid("fit_dss: trials are not channel-aligned");
    }
    if groups.iter().all(|g| g.len() < 2) {
        return invalid("fit_dss: no condition has two or more repetitions");
    }
    if n_keep == 0 {
        return invalid("fit_dss: n_keep must be positive");
    }

    let mut c0 = DMatrix::<f64>::zeros(c, c);
    let mut c1 = DMatrix::<f64>::zeros(c, c);
    let mut n_total = 0usize;
    for g in groups {
        let Some(t0) = g.first() else { continue };
        let shape = t0.dim();
        if g.iter().any(|t| t.dim() != shape) {
            return invalid("fit_dss: trials within a condition differ in length");
        }
        let mut avg = Array2::<f64>::zeros(shape);
        for t in g {
            let x = centered(t);
            outer_sum(&mut c0, &x, 1.0);
            avg += &x;
            n_total += t.ncols();
        }
        if g.len() >= 2 {
            avg /= g.len() as f64;
            outer_sum(&mut c1, &avg, g.len() as f64);
        }
    }
    c0 /= n_total as f64;
    c1 /= n_total as f64;

    let (evals, evecs) = sorted_symmetric_eigen(c0.clone());
    let top = evals[0];
    if !(top > 0.0) {
        return Err(Error::Degenerate("fit_dss: baseline covariance is zero".into()));
    }
    let k = evals.iter().take_while(|&&v| v > rank_tolerance * top).count();
    if k < n_keep {
        return Err(Error::Degenerate(format!(
            "fit_dss: baseline rank {k} is below n_keep {n_keep}"
        )));
    }
    let mut whitener = DMatrix::<f64>::zeros(k, c);
    for i in 0..k {
        let row = evecs.column(i).transpose() / evals[i].sqrt();
        whitener.set_row(i, &row);
    }
    let biased = &whitener * &c1 * whitener.transpose();
    let (scores, rotations) = sorted_symmetric_eigen(biased);
    let consistency_scores: Vec<f64> = scores.iter().map(|v| v.clamp(0.0, 1.0)).collect();

    let kept = rotations.columns(0, n_keep).clone_owned();
    let unmixer = kept.transpose() * &whitener;
    // component covariances are identity, so the patterns are C0 · unmixerᵀ
    let remixer = &c0 * unmixer.transpose();

    Ok(DssModel {
        whitener: to_nd(&whitener),
        rotations: to_nd(&rotations),
        n_keep,
        consistency_scores,
        unmixer: to_nd(&unmixer),
        remixer: to_nd(&remixer),
    })
}

/// Fits on a subject's trials grouped by their condition label.
pub fn fit_dss_dataset(dataset: &SubjectDataset, n_keep: usize, rank_tolerance: f64) -> Result<DssModel> {
    let groups: Vec<Vec<&Array2<f64>>> = ConditionLabel::all()
        .iter()
        .map(|&c| dataset.trials_with(c).map(|(_, t)| &t.data).collect())
        .collect();
    fit_dss(&groups, n_keep, rank_tolerance)
}

impl DssModel {
    pub fn n_channels(&self) -> usize {
        self.unmixer.ncols()
    }

    /// Sensor-space denoising matrix `remixer · unmixer` (`C × C`).
    pub fn projection(&self) -> Array2<f64> {
        self.remixer.dot(&self.unmixer)
    }

    /// Component time courses `unmixer · data`.
    pub fn components(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.nrows() != self.n_channels() {
            return invalid(format!(
                "DSS model expects {} channels, trial has {}",
                self.n_channels(),
                data.nrows()
            ));
        }
        Ok(self.unmixer.dot(data))
    }

    pub fn denoise(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.remixer.dot(&self.components(data)?))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = DssHeader {
            n_channels: self.n_channels(),
            rank: self.whitener.nrows(),
            n_keep: self.n_keep,
            consistency_scores: self.consistency_scores.clone(),
            files: DssFiles {
                whitener: format!("{name}_whitener.f64"),
                rotations: format!("{name}_rotations.f64"),
                unmixer: format!("{name}_unmixer.f64"),
                remixer: format!("{name}_remixer.f64"),
            },
        };
        write_f64_matrix(&dir.join(&header.files.whitener), &self.whitener)?;
        write_f64_matrix(&dir.join(&header.files.rotations), &self.rotations)?;
        write_f64_matrix(&dir.join(&header.files.unmixer), &self.unmixer)?;
        write_f64_matrix(&dir.join(&header.files.remixer), &self.remixer)?;
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<DssModel> {
        let path = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: DssHeader = serde_json::from_str(&text).map_err(|source| Error::Manifest { path, source })?;
        let (c, k, n) = (h.n_channels, h.rank, h.n_keep);
        Ok(DssModel {
            whitener: read_f64_matrix(&dir.join(&h.files.whitener), k, c)?,
            rotations: read_f64_matrix(&dir.join(&h.files.rotations), k, k)?,
            n_keep: n,
            consistency_scores: h.consistency_scores,
            unmixer: read_f64_matrix(&dir.join(&h.files.unmixer), n, c)?,
            remixer: read_f64_matrix(&dir.join(&h.files.remixer), c, n)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DssHeader {
    n_channels: usize,
    rank: usize,
    n_keep: usize,
    consistency_scores: Vec<f64>,
    files: DssFiles,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DssFiles {
    whitener: String,
    rotations: String,
    unmixer: String,
    remixer: String,
}

/// Projects a trial onto the retained components and back to sensor space.
pub fn apply_dss_denoise(model: &DssModel, trial: &TrialRecord) -> Result<TrialRecord> {
    Ok(TrialRecord {
        data: model.denoise(&trial.data)?,
        ..trial.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson_r;
    use crate::synth::{generate_dataset, planted_source_trials, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn noise_trials(n: usize, c: usize, t: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array2::from_shape_simple_fn((c, t), || StandardNormal.sample(&mut rng)))
            .collect()
    }

    #[test]
    fn planted_source_is_top_component() {
        let p = planted_source_trials(16, 10, 1000, 100.0, 0.5, 11).unwrap();
        let group: Vec<&Array2<f64>> = p.trials.iter().collect();
        let model = fit_dss(&[group], 7, DEFAULT_RANK_TOLERANCE).unwrap();
        let mut avg = Array2::<f64>::zeros(p.trials[0].dim());
        for t in &p.trials {
            avg += t;
        }
        avg /= p.trials.len() as f64;
        let comp = model.components(&avg).unwrap();
        let r = pearson_r(&comp.row(0).to_vec(), &p.source).unwrap();
        assert!(r.abs() > 0.9, "{r}");
        // single-trial time course as well
        let single = model.components(&p.trials[0]).unwrap();
        assert!(pearson_r(&single.row(0).to_vec(), &p.source).unwrap().abs() > 0.5);
    }

    #[test]
    fn identical_trials_fully_consistent() {
        let base = noise_trials(1, 5, 300, 2).remove(0);
        let group = vec![&base; 10];
        let model = fit_dss(&[group], 3, DEFAULT_RANK_TOLERANCE).unwrap();
        assert!((model.consistency_scores[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pure_noise_scores_low() {
        let trials = noise_trials(10, 16, 1000, 5);
        let model = fit_dss(&[trials.iter().collect()], 7, DEFAULT_RANK_TOLERANCE).unwrap();
        assert!(model.consistency_scores.iter().all(|&s| s < 0.3), "{:?}", model.consistency_scores);
        assert!(model.consistency_scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn whitened_baseline_is_identity_and_map_idempotent() {
        let trials = noise_trials(6, 8, 400, 9);
        let refs: Vec<&Array2<f64>> = trials.iter().collect();
        let model = fit_dss(&[refs[..3].to_vec(), refs[3..].to_vec()], 4, DEFAULT_RANK_TOLERANCE).unwrap();
        let mut c0 = Array2::<f64>::zeros((8, 8));
        for t in &trials {
            let x = centered(t);
            c0 += &x.dot(&x.t());
        }
        c0 /= (6 * 400) as f64;
        let w = &model.whitener;
        let white = w.dot(&c0).dot(&w.t());
        assert!(max_abs(&(white - Array2::<f64>::eye(8))) < 1e-8);
        let p = model.projection();
        assert!(max_abs(&(p.dot(&p) - &p)) < 1e-8);
    }

    #[test]
    fn complete_basis_is_identity() {
        let trials = noise_trials(4, 6, 300, 1);
        let model = fit_dss(&[trials.iter().collect()], 6, DEFAULT_RANK_TOLERANCE).unwrap();
        let out = model.denoise(&trials[0]).unwrap();
        assert!(max_abs(&(out - &trials[0])) < 1e-8);
    }

    #[test]
    fn span_of_kept_components_is_fixed() {
        let trials = noise_trials(5, 6, 300, 3);
        let model = fit_dss(&[trials.iter().collect()], 2, DEFAULT_RANK_TOLERANCE).unwrap();
        let in_span = model.denoise(&trials[1]).unwrap();
        let again = model.denoise(&in_span).unwrap();
        assert!(max_abs(&(again - &in_span)) < 1e-8);
    }

    #[test]
    fn denoising_improves_planted_source_correlation() {
        let p = planted_source_trials(16, 10, 1000, 100.0, 0.2, 21).unwrap();
        let model = fit_dss(&[p.trials.iter().collect()], 1, DEFAULT_RANK_TOLERANCE).unwrap();
        let trial = &p.trials[3];
        let clean = model.denoise(trial).unwrap();
        // the planted channel with the largest pattern weight
        let ch = p
            .pattern
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let before = pearson_r(&trial.row(ch).to_vec(), &p.source).unwrap().abs();
        let after = pearson_r(&clean.row(ch).to_vec(), &p.source).unwrap().abs();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn errors() {
        let one = noise_trials(1, 4, 100, 0);
        assert!(fit_dss(&[one.iter().collect()], 2, DEFAULT_RANK_TOLERANCE).is_err());
        // rank 2 data cannot supply 3 components
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let low: Vec<Array2<f64>> = (0..4)
            .map(|_| {
                let s: Array2<f64> = Array2::from_shape_simple_fn((2, 100), || StandardNormal.sample(&mut rng));
                Array2::from_shape_fn((5, 2), |(i, j)| (i + 2 * j) as f64 + 1.0).dot(&s)
            })
            .collect();
        assert!(matches!(
            fit_dss(&[low.iter().collect()], 3, DEFAULT_RANK_TOLERANCE),
            Err(Error::Degenerate(_))
        ));
        let model = fit_dss(&[low.iter().collect()], 2, DEFAULT_RANK_TOLERANCE).unwrap();
        assert!(model.denoise(&Array2::zeros((4, 10))).is_err());
    }

    #[test]
    fn scores_invariant_to_channel_permutation() {
        let p = planted_source_trials(8, 6, 500, 100.0, 0.5, 4).unwrap();
        let perm = [3usize, 0, 7, 1, 5, 2, 6, 4];
        let permuted: Vec<Array2<f64>> = p.trials.iter().map(|t| t.select(Axis(0), &perm)).collect();
        let a = fit_dss(&[p.trials.iter().collect()], 3, DEFAULT_RANK_TOLERANCE).unwrap();
        let b = fit_dss(&[permuted.iter().collect()], 3, DEFAULT_RANK_TOLERANCE).unwrap();
        for (x, y) in a.consistency_scores.iter().zip(&b.consistency_scores) {
            assert!((x - y).abs() < 1e-9);
        }
        // unmixer columns follow the channels (up to sign)
        for k in 0..3 {
            for (new_col, &old_col) in perm.iter().enumerate() {
                assert!((a.unmixer[[k, old_col]].abs() - b.unmixer[[k, new_col]].abs()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_half_reproducibility_does_not_drop() {
        let cfg = SynthConfig {
            n_subjects: 1,
            duration_s: 10.0,
            jitter_ms: 0.0,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_dataset(&cfg).unwrap();
        let model = fit_dss_dataset(&ds[0], 7, DEFAULT_RANK_TOLERANCE).unwrap();
        let split_half = |denoise: bool| -> f64 {
            let mut rs = Vec::new();
            for cond in ConditionLabel::all() {
                let trials: Vec<Array2<f64>> = ds[0]
                    .trials_with(cond)
                    .map(|(_, t)| if denoise { model.denoise(&t.data).unwrap() } else { t.data.clone() })
                    .collect();
                let half = trials.len() / 2;
                let mean = |ts: &[Array2<f64>]| ts.iter().fold(Array2::<f64>::zeros(ts[0].dim()), |a, b| a + b) / ts.len() as f64;
                let (a, b) = (mean(&trials[..half]), mean(&trials[half..]));
                for ch in 0..a.nrows() {
                    rs.push(pearson_r(&a.row(ch).to_vec(), &b.row(ch).to_vec()).unwrap());
                }
            }
            rs.iter().sum::<f64>() / rs.len() as f64
        };
        let (raw, clean) = (split_half(false), split_half(true));
        assert!(clean >= raw, "{clean} < {raw}");
    }

    #[test]
    fn save_load_round_trip() {
        let trials = noise_trials(4, 5, 200, 8);
        let model = fit_dss(&[trials.iter().collect()], 2, DEFAULT_RANK_TOLERANCE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "sub01").unwrap();
        assert_eq!(DssModel::load(dir.path(), "sub01").unwrap(), model);
    }
}
