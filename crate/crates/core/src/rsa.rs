//! Trial-by-trial similarity and the nearest-condition classifier.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ConditionLabel, SubjectDataset};
use crate::error::{invalid, Error, Result};

/// Channel-averaged Pearson similarity between trials, rows ordered by
/// condition index then repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub labels: Vec<ConditionLabel>,
    /// Position of each row in the source dataset's trial list.
    pub trial_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAverage {
    /// Conditions present, ascending by index.
    pub conditions: Vec<ConditionLabel>,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`, indexed by condition index.
    pub counts: [[u64; 8]; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<ConditionLabel>,
    pub accuracy: f64,
}

pub const CHANCE_LEVEL: f64 = 1.0 / 8.0;

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized percentages; rows with no trials stay at zero.
    pub fn percentages(&self) -> [[f64; 8]; 8] {
        let mut out = [[0.0; 8]; 8];
        for (row, counts) in out.iter_mut().zip(&self.counts) {
            let n: u64 = counts.iter().sum();
            if n > 0 {
                for (p, &c) in row.iter_mut().zip(counts) {
                    *p = 100.0 * c as f64 / n as f64;
                }
            }
        }
        out
    }
}

/// Unit-norm, zero-mean copy of a time course, or `None` if it is constant.
fn normalized(x: ArrayView1<f64>) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let m = x.sum() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(centered.into_iter().map(|v| v / norm).collect())
}

pub fn trial_similarity(dataset: &SubjectDataset) -> Result<SimilarityMatrix> {
    let mut order: Vec<usize> = (0..dataset.trials.len()).collect();
    order.sort_by_key(|&i| {
        let t = &dataset.trials[i];
        (t.condition.index(), t.repetition)
    });
    if order.is_empty() {
        return invalid(format!("{}: no trials", dataset.subject_id));
    }
    let t_len = dataset.trials[order[0]].n_samples();
    let c = dataset.trials[order[0]].n_channels();
    if order.iter().any(|&i| dataset.trials[i].data.dim() != (c, t_len)) {
        return invalid(format!("{}: trials differ in shape", dataset.subject_id));
    }
    let n = order.len();

    // one (sum, count) pair per channel, reduced in channel order
    let per_channel: Vec<(Array2<f64>, Array2<f64>)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let rows: Vec<Option<Vec<f64>>> = order
                .iter()
                .map(|&i| normalized(dataset.trials[i].data.row(ch)))
                .collect();
            let mut z = Array2::<f64>::zeros((n, t_len));
            let mut valid = Array2::<f64>::zeros((n, 1));
            for (k, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    z.row_mut(k).assign(&ArrayView1::from(r.as_slice()));
                    valid[[k, 0]] = 1.0;
                }
            }
            (z.dot(&z.t()), valid.dot(&valid.t()))
        })
        .collect();
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut count = Array2::<f64>::zeros((n, n));
    for (s, k) in &per_channel {
        sum += s;
        count += k;
    }
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            if count[[i, j]] == 0.0 {
                return Err(Error::Degenerate(format!(
                    "{}: trials {} and {} share no non-constant channel",
                    dataset.subject_id, order[i], order[j]
                )));
            }
            let v = if i == j { 1.0 } else { (sum[[i, j]] / count[[i, j]]).clamp(-1.0, 1.0) };
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix {
        values,
        labels: order.iter().map(|&i| dataset.trials[i].condition).collect(),
        trial_indices: order,
    })
}

/// Contiguous runs of equal labels; errors if a label reappears later.
fn blocks(labels: &[ConditionLabel]) -> Result<Vec<(ConditionLabel, usize, usize)>> {
    let mut out: Vec<(ConditionLabel, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((prev, _, end)) if *prev == l => *end = i + 1,
            _ => {
                if out.iter().any(|(p, _, _)| *p == l) {
                    return invalid(format!("similarity rows for {l} are not contiguous"));
                }
                out.push((l, i, i + 1));
            }
        }
    }
    out.sort_by_key(|(l, _, _)| l.index());
    Ok(out)
}

pub fn block_average(sim: &SimilarityMatrix) -> Result<BlockAverage> {
    let n = sim.labels.len();
    if sim.values.dim() != (n, n) {
        return invalid("similarity matrix shape does not match its labels");
    }
    let runs = blocks(&sim.labels)?;
    let k = runs.len();
    let mut values = Array2::<f64>::zeros((k, k));
    for (a, &(la, sa, ea)) in runs.iter().enumerate() {
        for (b, &(_, sb, eb)) in runs.iter().enumerate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for i in sa..ea {
                for j in sb..eb {
                    if i != j {
                        total += sim.values[[i, j]];
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return invalid(format!("condition {la} has a single trial; its diagonal block is empty"));
            }
            values[[a, b]] = total / count as f64;
        }
    }
    Ok(BlockAverage {
        conditions: runs.into_iter().map(|(l, _, _)| l).collect(),
        values,
    })
}

/// Assigns each trial to the condition with the highest mean similarity
/// over all other trials. Ties go to the lower condition index.
pub fn classify_similarity(sim: &SimilarityMatrix) -> Result<Classification> {
    let n = sim.labels.len();
    if sim.values.dim() != (n, n) || n == 0 {
        return invalid("similarity matrix shape does not match its labels");
    }
    let mut members: [Vec<usize>; 8] = Default::default();
    for (i, l) in sim.labels.iter().enumerate() {
        members[l.index()].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.len() == 1) {
        return invalid(format!(
            "condition {} has one trial; classification needs at least two",
            ConditionLabel::from_index(c).expect("index < 8")
        ));
    }
    let mut confusion = ConfusionMatrix { counts: [[0; 8]; 8] };
    let mut predictions = Vec::with_capacity(n);
    let mut correct = 0usize;
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (c, m) in members.iter().enumerate() {
            let others: Vec<f64> = m.iter().filter(|&&j| j != i).map(|&j| sim.values[[i, j]]).collect();
            if others.is_empty() {
                continue;
            }
            let avg = others.iter().sum::<f64>() / others.len() as f64;
            if best.map_or(true, |(_, b)| avg > b) {
                best = Some((c, avg));
            }
        }
        let (pred, _) = best.expect("at least one condition has two trials");
        let truth = sim.labels[i].index();
        confusion.counts[truth][pred] += 1;
        correct += usize::from(truth == pred);
        predictions.push(ConditionLabel::from_index(pred).expect("index < 8"));
    }
    Ok(Classification {
        confusion,
        predictions,
        accuracy: correct as f64 / n as f64,
    })
}

pub fn correlation_classify(dataset: &SubjectDataset) -> Result<Classification> {
    classify_similarity(&trial_similarity(dataset)?)
}

/// Element-wise mean of per-subject matrices with identical row labels.
pub fn average_similarity(mats: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = mats.first().ok_or_else(|| Error::Invalid("no similarity matrices to average".into()))?;
    if mats.iter().any(|m| m.labels != first.labels) {
        return invalid("similarity matrices have different trial layouts");
    }
    let mut values = Array2::<f64>::zeros(first.values.dim());
    for m in mats {
        values += &m.values;
    }
    values /= mats.len() as f64;
    Ok(SimilarityMatrix {
        values,
        labels: first.labels.clone(),
        trial_indices: first.trial_indices.clone(),
    })
}

/// Mean within-condition and between-condition off-diagonal entries.
pub fn within_between_means(sim: &SimilarityMatrix) -> (f64, f64) {
    let n = sim.labels.len();
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if sim.labels[i] == sim.labels[j] {
                w += sim.values[[i, j]];
                nw += 1;
            } else {
                b += sim.values[[i, j]];
                nb += 1;
            }
        }
    }
    (w / nw.max(1) as f64, b / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_channel_names, TrialRecord};
    use crate::stats::pearson_r;
    use crate::synth::{generate_dataset, SynthConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn label(i: usize) -> ConditionLabel {
        ConditionLabel::from_index(i).unwrap()
    }

    fn dataset_from(trials: Vec<(usize, Array2<f64>)>) -> SubjectDataset {
        let c = trials[0].1.nrows();
        let mut reps = [0u32; 8];
        let trials = trials
            .into_iter()
            .map(|(cond, data)| {
                reps[cond] += 1;
                TrialRecord {
                    subject_id: "s".into(),
                    condition: label(cond),
                    repetition: reps[cond],
                    sample_rate_hz: 100.0,
                    data,
                }
            })
            .collect();
        SubjectDataset {
            subject_id: "s".into(),
            trials,
            channel_names: default_channel_names(c),
        }
    }

    fn noise(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((c, t), || StandardNormal.sample(rng))
    }

    #[test]
    fn diagonal_and_anticorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = noise(&mut rng, 3, 50);
        let ds = dataset_from(vec![(0, y.clone()), (0, -&y)]);
        let sim = trial_similarity(&ds).unwrap();
        assert_eq!(sim.values[[0, 0]], 1.0);
        assert!((sim.values[[0, 1]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn entries_match_channel_mean_of_pearson() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise(&mut rng, 4, 60);
        let b = noise(&mut rng, 4, 60);
        let sim = trial_similarity(&dataset_from(vec![(0, a.clone()), (1, b.clone())])).unwrap();
        let oracle: f64 = (0..4)
            .map(|ch| pearson_r(&a.row(ch).to_vec(), &b.row(ch).to_vec()).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((sim.values[[0, 1]] - oracle).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = noise(&mut rng, 3, 40);
        let mut b = noise(&mut rng, 3, 40);
        b.row_mut(2).fill(1.5);
        let sim = trial_similarity(&dataset_from(vec![(0, a.clone()), (0, b.clone())])).unwrap();
        let oracle = (0..2)
            .map(|ch| pearson_r(&a.row(ch).to_vec(), &b.row(ch).to_vec()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((sim.values[[0, 1]] - oracle).abs() < 1e-12);

        let flat = Array2::from_elem((3, 40), 2.0);
        assert!(matches!(
            trial_similarity(&dataset_from(vec![(0, a), (0, flat)])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rows_are_condition_blocked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = vec![3, 0, 3, 1, 0, 1]
            .into_iter()
            .map(|c| (c, noise(&mut rng, 2, 30)))
            .collect();
        let sim = trial_similarity(&dataset_from(trials)).unwrap();
        let idx: Vec<usize> = sim.labels.iter().map(|l| l.index()).collect();
        assert_eq!(idx, vec![0, 0, 1, 1, 3, 3]);
        assert_eq!(sim.trial_indices, vec![1, 4, 3, 5, 0, 2]);
    }

    fn toy(values: Array2<f64>, labels: &[usize]) -> SimilarityMatrix {
        SimilarityMatrix {
            values,
            labels: labels.iter().map(|&i| label(i)).collect(),
            trial_indices: (0..labels.len()).collect(),
        }
    }

    #[test]
    fn block_average_examples() {
        let mut v = Array2::from_elem((4, 4), 0.5);
        v.diag_mut().fill(1.0);
        let b = block_average(&toy(v, &[0, 0, 1, 1])).unwrap();
        assert!(b.values.iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let v = Array2::from_shape_fn((6, 6), |(i, j)| {
            if i == j {
                1.0
            } else if i / 3 == j / 3 {
                0.8
            } else {
                0.1
            }
        });
        let b = block_average(&toy(v, &[2, 2, 2, 5, 5, 5])).unwrap();
        assert_eq!(b.conditions, vec![label(2), label(5)]);
        assert!((b.values[[0, 0]] - 0.8).abs() < 1e-15 && (b.values[[1, 0]] - 0.1).abs() < 1e-15);

        // hand computation on a 4×4 toy
        let v = ndarray::array![
            [1.0, 0.6, 0.2, -0.1],
            [0.6, 1.0, 0.0, 0.3],
            [0.2, 0.0, 1.0, 0.4],
            [-0.1, 0.3, 0.4, 1.0]
        ];
        let b = block_average(&toy(v, &[0, 0, 1, 1])).unwrap();
        let hand = ndarray::array![[0.6, 0.1], [0.1, 0.4]];
        assert!(b.values.iter().zip(hand.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn block_average_rejects_interleaved_rows() {
        let v = Array2::eye(3);
        assert!(block_average(&toy(v, &[0, 1, 0])).is_err());
    }

    #[test]
    fn classifier_excludes_self_and_breaks_ties_low() {
        // trial 0 is similar only to itself and equally to both conditions otherwise
        let v = ndarray::array![
            [1.0, 0.2, 0.2, 0.2],
            [0.2, 1.0, 0.0, 0.0],
            [0.2, 0.0, 1.0, 0.9],
            [0.2, 0.0, 0.9, 1.0]
        ];
        let res = classify_similarity(&toy(v, &[1, 1, 0, 0])).unwrap();
        assert_eq!(res.predictions[0], label(0));
        assert_eq!(res.predictions[1], label(1));
        assert_eq!(res.predictions[2], label(0));
        assert_eq!(res.confusion.total(), 4);
        assert_eq!(res.accuracy, 0.75);
    }

    #[test]
    fn single_trial_condition_is_rejected() {
        let v = Array2::eye(3);
        assert!(classify_similarity(&toy(v, &[0, 0, 1])).is_err());
    }

    #[test]
    fn percentages_rows_sum_to_hundred() {
        let mut cm = ConfusionMatrix { counts: [[0; 8]; 8] };
        cm.counts[0] = [3, 1, 0, 0, 0, 0, 0, 2];
        cm.counts[4] = [0, 0, 0, 0, 7, 0, 0, 0];
        let p = cm.percentages();
        assert!((p[0].iter().sum::<f64>() - 100.0).abs() < 0.01);
        assert!((p[4][4] - 100.0).abs() < 1e-12);
        assert_eq!(p[1].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn synth_within_exceeds_between() {
        let cfg = SynthConfig {
            n_subjects: 1,
            duration_s: 10.0,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_dataset(&cfg).unwrap();
        let sim = trial_similarity(&ds[0]).unwrap();
        let (w, b) = within_between_means(&sim);
        assert!(w > b, "{w} <= {b}");
        for i in 0..sim.labels.len() {
            for j in 0..sim.labels.len() {
                assert!((sim.values[[i, j]] - sim.values[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_free_synth_is_perfectly_classified() {
        let cfg = SynthConfig {
            n_subjects: 1,
            duration_s: 8.0,
            n_repetitions: 3,
            snr_listen: f64::INFINITY,
            snr_imagine: f64::INFINITY,
            jitter_ms: 0.0,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_dataset(&cfg).unwrap();
        assert_eq!(correlation_classify(&ds[0]).unwrap().accuracy, 1.0);
    }

    #[test]
    fn average_rejects_mismatched_layouts() {
        let a = toy(Array2::eye(2), &[0, 0]);
        let b = toy(Array2::eye(2), &[0, 1]);
        assert!(average_similarity(&[a.clone(), b]).is_err());
        assert_eq!(average_similarity(&[a.clone(), a.clone()]).unwrap(), a);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn invariant_to_positive_affine_per_channel(
            seed in 0u64..1000,
            scales in prop::collection::vec(0.01f64..100.0, 3),
            shifts in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trials: Vec<(usize, Array2<f64>)> = (0..4).map(|k| (k % 2, noise(&mut rng, 3, 40))).collect();
            let base = trial_similarity(&dataset_from(trials.clone())).unwrap();
            let moved: Vec<(usize, Array2<f64>)> = trials
                .into_iter()
                .map(|(c, mut x)| {
                    for ch in 0..3 {
                        x.row_mut(ch).mapv_inplace(|v| v * scales[ch] + shifts[ch]);
                    }
                    (c, x)
                })
                .collect();
            let other = trial_similarity(&dataset_from(moved)).unwrap();
            for (a, b) in base.values.iter().zip(other.values.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn classifier_invariant_to_monotone_transform(seed in 0u64..1000, k in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let labels: Vec<usize> = (0..n).map(|i| i / 3).collect();
            let mut v = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in i..n {
                    let x: f64 = if i == j { 1.0 } else { StandardNormal.sample(&mut rng) };
                    let x = x.tanh();
                    v[[i, j]] = x;
                    v[[j, i]] = x;
                }
            }
            let a = classify_similarity(&toy(v.clone(), &labels)).unwrap();
            // class means preserve their order under increasing affine maps only
            let b = classify_similarity(&toy(v.mapv(|x| k * x - 3.0), &labels)).unwrap();
            prop_assert_eq!(a.predictions, b.predictions);
        }
    }

    #[test]
    fn label_shuffle_gives_chance_accuracy() {
        let cfg = SynthConfig {
            n_subjects: 1,
            duration_s: 6.0,
            ..SynthConfig::default()
        };
        let (ds, _) = generate_dataset(&cfg).unwrap();
        let mut sim = trial_similarity(&ds[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let perm = crate::synth::random_permutation(sim.labels.len(), &mut rng);
        sim.labels = perm.iter().map(|&p| sim.labels[p]).collect();
        let res = classify_similarity(&sim).unwrap();
        let (lo, hi) = crate::stats::binomial_interval95(80, CHANCE_LEVEL).unwrap();
        let hits = (res.accuracy * 80.0).round() as u64;
        assert!(hits >= lo && hits <= hi, "{hits} outside [{lo}, {hi}]");
    }
}
