//! Correlation, Fisher z, Wilcoxon signed-rank and the handful of other
//! tests used to compare true and null models.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};

/// Correlations are clamped to this magnitude before `atanh`.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-12;

/// Largest number of non-zero differences for which the signed-rank null
/// distribution is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample Pearson correlation. Constant inputs have no defined correlation
/// and produce [`Error::Degenerate`]; callers decide whether to skip them.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!("pearson_r: lengths {} and {} differ", x.len(), y.len()));
    }
    if x.len() < 2 {
        return invalid("pearson_r needs at least two samples");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson_r on a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `atanh(r)` with `|r|` clamped to [`FISHER_CLAMP`].
pub fn fisher_z(r: f64) -> Result<f64> {
    if !(r.abs() <= 1.0) {
        return invalid(format!("fisher_z: |r| = {} exceeds 1", r.abs()));
    }
    Ok(r.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh())
}

/// Standard error of the mean with the `n - 1` standard deviation.
pub fn sem(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return invalid("sem needs at least two values");
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Ok(var.sqrt() / (n as f64).sqrt())
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Values matched by index, e.g. one true and one null score per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(labels: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || labels.len() != a.len() {
            return invalid("paired sample needs equal, non-zero lengths");
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("paired sample".into()));
        }
        Ok(PairedSample { labels, a, b })
    }

    pub fn unlabeled(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let labels = (0..a.len()).map(|i| i.to_string()).collect();
        Self::new(labels, a, b)
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a - b).collect()
    }

    pub fn swapped(&self) -> PairedSample {
        PairedSample {
            labels: self.labels.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Fewer than five non-zero differences; p is reported as 1.
    TooFewDifferences,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)` in rank units.
    pub statistic: f64,
    pub p_value: f64,
    pub n_nonzero: usize,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|` (1-based), ties sharing the mean of their ranks.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        if end - start > 1 {
            tie_sizes.push(end - start);
        }
        start = end;
    }
    (ranks, tie_sizes)
}

struct SignedRanks {
    ranks: Vec<f64>,
    w_plus: f64,
    tie_sizes: Vec<usize>,
}

fn signed_ranks(paired: &PairedSample) -> SignedRanks {
    let d: Vec<f64> = paired.differences().into_iter().filter(|&v| v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, tie_sizes) = average_ranks(&abs);
    let w_plus = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    SignedRanks {
        ranks,
        w_plus,
        tie_sizes,
    }
}

/// Exact two-sided p: the null distribution of `W+` over all `2^n` sign
/// assignments, counted by dynamic programming over doubled (integer) ranks.
fn exact_p(sr: &SignedRanks) -> f64 {
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let n_patterns = 2f64.powi(doubled.len() as i32);
    let w_plus = (2.0 * sr.w_plus).round() as usize;
    let w_min = w_plus.min(total - w_plus);
    let lower: f64 = counts[..=w_min].iter().sum();
    let upper: f64 = counts[total - w_min..].iter().sum();
    if 2 * w_min >= total {
        return 1.0;
    }
    ((lower + upper) / n_patterns).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(sr: &SignedRanks) -> f64 {
    let n = sr.ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = sr
        .tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((sr.w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * std_normal_sf(z)).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// dropped; the exact distribution is used up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero differences.
pub fn wilcoxon_signed_rank(paired: &PairedSample) -> Result<WilcoxonResult> {
    let sr = signed_ranks(paired);
    let method = if sr.ranks.len() <= WILCOXON_EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::Normal
    };
    wilcoxon_with(paired, sr, method)
}

/// Same test with the method forced; used to compare the two routes.
pub fn wilcoxon_signed_rank_using(paired: &PairedSample, method: WilcoxonMethod) -> Result<WilcoxonResult> {
    wilcoxon_with(paired, signed_ranks(paired), method)
}

fn wilcoxon_with(paired: &PairedSample, sr: SignedRanks, method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if paired.a.is_empty() {
        return invalid("wilcoxon on an empty sample");
    }
    let n = sr.ranks.len();
    let total: f64 = sr.ranks.iter().sum();
    let statistic = sr.w_plus.min(total - sr.w_plus);
    if n < 5 {
        log::warn!("wilcoxon: only {n} non-zero differences, reporting p = 1");
        return Ok(WilcoxonResult {
            statistic,
            p_value: 1.0,
            n_nonzero: n,
            method: WilcoxonMethod::TooFewDifferences,
        });
    }
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(&sr),
        WilcoxonMethod::Normal => normal_p(&sr),
        WilcoxonMethod::TooFewDifferences => 1.0,
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n_nonzero: n,
        method,
    })
}

/// One-sided Mann-Whitney rank-sum test of `a` stochastically greater than
/// `b` (normal approximation with tie and continuity corrections).
pub fn rank_sum_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("rank-sum test needs two non-empty samples");
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u = r_a - na * (na + 1.0) / 2.0;
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (u - na * nb / 2.0 - 0.5) / var.sqrt();
    Ok(std_normal_sf(z))
}

/// Two-sample Kolmogorov-Smirnov test: `(D, asymptotic p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return invalid("KS test needs two non-empty samples");
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok((d, kolmogorov_sf(lambda)))
}

fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = sign * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `P[X >= successes]` for `X ~ Binomial(trials, p)`.
pub fn binomial_upper_p(successes: u64, trials: u64, p: f64) -> Result<f64> {
    let dist = Binomial::new(p, trials).map_err(|e| Error::Invalid(e.to_string()))?;
    if successes == 0 {
        return Ok(1.0);
    }
    Ok(dist.sf(successes - 1))
}

/// Central 95% interval of `Binomial(trials, p)` as success counts.
pub fn binomial_interval95(trials: u64, p: f64) -> Result<(u64, u64)> {
    let dist = Binomial::new(p, trials).map_err(|e| Error::Invalid(e.to_string()))?;
    let quantile = |q: f64| (0..=trials).find(|&k| dist.cdf(k) >= q).unwrap_or(trials);
    Ok((quantile(0.025), quantile(0.975)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub r_true: f64,
    pub r_null: f64,
    pub z_true: f64,
    pub z_null: f64,
}

/// Paired true-vs-null comparison across subjects, tested on Fisher z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: Vec<SubjectScore>,
    pub mean_r_true: f64,
    pub mean_r_null: f64,
    pub sem_r_true: Option<f64>,
    pub sem_r_null: Option<f64>,
    pub mean_z_true: f64,
    pub mean_z_null: f64,
    pub n_true_greater: usize,
    pub wilcoxon: WilcoxonResult,
}

impl EvalReport {
    pub fn from_correlations(paired: &PairedSample) -> Result<EvalReport> {
        let subjects = paired
            .labels
            .iter()
            .zip(paired.a.iter().zip(&paired.b))
            .map(|(id, (&rt, &rn))| {
                Ok(SubjectScore {
                    subject_id: id.clone(),
                    r_true: rt,
                    r_null: rn,
                    z_true: fisher_z(rt)?,
                    z_null: fisher_z(rn)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let z = PairedSample::new(
            paired.labels.clone(),
            subjects.iter().map(|s| s.z_true).collect(),
            subjects.iter().map(|s| s.z_null).collect(),
        )?;
        let wilcoxon = wilcoxon_signed_rank(&z)?;
        Ok(EvalReport {
            mean_r_true: mean(&paired.a).unwrap_or(0.0),
            mean_r_null: mean(&paired.b).unwrap_or(0.0),
            sem_r_true: sem(&paired.a).ok(),
            sem_r_null: sem(&paired.b).ok(),
            mean_z_true: mean(&z.a).unwrap_or(0.0),
            mean_z_null: mean(&z.b).unwrap_or(0.0),
            n_true_greater: subjects.iter().filter(|s| s.r_true > s.r_null).count(),
            subjects,
            wilcoxon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson_r(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson_r(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, epsilon = 1e-15);
        // cov = 4/4 = 1.0 over 4, var_x = var_y = 1.25: r = 1 / 1.25
        assert_abs_diff_eq!(pearson_r(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(), 0.8, epsilon = 1e-12);
        assert!(matches!(pearson_r(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::Degenerate(_))));
        assert!(pearson_r(&[1.], &[1.]).is_err());
    }

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_z(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(fisher_z(0.5).unwrap(), 0.549_306_144_334_054_8, epsilon = 1e-12);
        let z1 = fisher_z(1.0).unwrap();
        assert!(z1.is_finite());
        assert_abs_diff_eq!(z1, 0.5 * ((2.0 - 1e-12) / 1e-12f64).ln(), epsilon = 1e-3);
        assert!((z1 - 14.1).abs() < 0.1);
        assert!(fisher_z(1.5).is_err());
    }

    #[test]
    fn sem_examples() {
        assert_eq!(sem(&[1., 1., 1.]).unwrap(), 0.0);
        assert_abs_diff_eq!(sem(&[0., 2.]).unwrap(), 1.0, epsilon = 1e-15);
        // sd = sqrt(5/3)
        assert_abs_diff_eq!(sem(&[1., 2., 3., 4.]).unwrap(), 0.645_497_224_367_903, epsilon = 1e-12);
        assert!(sem(&[1.0]).is_err());
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let p = PairedSample::unlabeled(vec![1., 2., 3., 4., 5.], vec![0.; 5]).unwrap();
        let w = wilcoxon_signed_rank(&p).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.method, WilcoxonMethod::Exact);
        assert_abs_diff_eq!(w.p_value, 2.0 / 32.0, epsilon = 1e-15);
    }

    #[test]
    fn wilcoxon_no_differences() {
        let p = PairedSample::unlabeled(vec![0.3; 6], vec![0.3; 6]).unwrap();
        let w = wilcoxon_signed_rank(&p).unwrap();
        assert_eq!(w.p_value, 1.0);
        assert_eq!(w.n_nonzero, 0);
        assert!(wilcoxon_signed_rank(&PairedSample { labels: vec![], a: vec![], b: vec![] }).is_err());
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
        let p = PairedSample::unlabeled(a, vec![0.0; 30]).unwrap();
        let w = wilcoxon_signed_rank(&p).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Normal);
        assert!(w.p_value > 0.0 && w.p_value <= 1.0);
    }

    #[test]
    fn rank_sum_and_ks_sanity() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 + 30.0).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(rank_sum_greater(&a, &b).unwrap() < 1e-6);
        assert!(rank_sum_greater(&b, &a).unwrap() > 0.99);
        let (d, p) = ks_two_sample(&a, &b).unwrap();
        assert_abs_diff_eq!(d, 0.6, epsilon = 1e-12);
        assert!(p < 1e-6);
        let (d, p) = ks_two_sample(&b, &b).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn binomial_helpers() {
        let (lo, hi) = binomial_interval95(80, 0.125).unwrap();
        assert!(lo >= 3 && lo <= 5, "{lo}");
        assert!(hi >= 15 && hi <= 17, "{hi}");
        assert_eq!(binomial_upper_p(0, 80, 0.125).unwrap(), 1.0);
        assert!(binomial_upper_p(40, 80, 0.125).unwrap() < 1e-10);
        // deep tail stays positive: P[X = 80] = 0.125^80
        let tail = binomial_upper_p(80, 80, 0.125).unwrap();
        assert!((tail / 0.125f64.powi(80) - 1.0).abs() < 1e-6, "{tail}");
    }

    #[test]
    fn eval_report_counts() {
        let p = PairedSample::new(
            (0..6).map(|i| format!("s{i}")).collect(),
            vec![0.3, 0.2, 0.25, 0.4, 0.1, 0.35],
            vec![0.0, 0.01, -0.02, 0.05, 0.2, 0.0],
        )
        .unwrap();
        let r = EvalReport::from_correlations(&p).unwrap();
        assert_eq!(r.n_true_greater, 5);
        assert_eq!(r.subjects.len(), 6);
        assert_abs_diff_eq!(r.subjects[0].z_true, 0.3f64.atanh(), epsilon = 1e-15);
        assert!(r.wilcoxon.p_value > 0.0 && r.wilcoxon.p_value <= 1.0);
    }

    proptest! {
        #[test]
        fn fisher_is_odd_and_increasing(r in -0.999f64..0.999, dr in 1e-6f64..0.001) {
            prop_assert!((fisher_z(-r).unwrap() + fisher_z(r).unwrap()).abs() <= 1e-14 * fisher_z(r).unwrap().abs().max(1.0));
            let r2 = (r + dr).min(0.9999);
            prop_assert!(fisher_z(r2).unwrap() > fisher_z(r).unwrap());
        }

        #[test]
        fn wilcoxon_swap_and_scale_invariant(
            d in proptest::collection::vec(-5.0f64..5.0, 5..20),
            scale in 0.1f64..10.0,
        ) {
            let p = PairedSample::unlabeled(d.clone(), vec![0.0; d.len()]).unwrap();
            let w = wilcoxon_signed_rank(&p).unwrap();
            let sw = wilcoxon_signed_rank(&p.swapped()).unwrap();
            prop_assert!((w.p_value - sw.p_value).abs() < 1e-12);
            let scaled = PairedSample::unlabeled(d.iter().map(|v| v * scale).collect(), vec![0.0; d.len()]).unwrap();
            let ws = wilcoxon_signed_rank(&scaled).unwrap();
            prop_assert!((w.p_value - ws.p_value).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            y in proptest::collection::vec(-10.0f64..10.0, 8),
            a in 0.1f64..5.0, b in -3.0f64..3.0,
        ) {
            if let (Ok(r), Ok(r2)) = (pearson_r(&x, &y), pearson_r(&x.iter().map(|v| a * v + b).collect::<Vec<_>>(), &y)) {
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }
    }
}
