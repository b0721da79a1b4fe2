//! Timing statistics: the one-sided Mann-Whitney U test, median-based
//! relative improvement, and the combined improvement verdict.
//!
//! A test demonstrates an execution-time improvement when the patched
//! samples are at least `delta` faster (by median) *and* the one-sided
//! Mann-Whitney p-value is strictly below `alpha`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Product of sample sizes at or below which the exact null distribution
/// is enumerated (tie-free data only).
pub const DEFAULT_EXACT_THRESHOLD: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample `{0}` is empty")]
    EmptySample(&'static str),
    #[error("sample `{which}` contains a non-positive or non-finite duration: {value}")]
    InvalidDuration { which: &'static str, value: f64 },
    #[error("invalid statistics configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

/// Direction of the alternative hypothesis, relative to the `post` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// `post` is stochastically smaller than `pre` (the patched version is faster).
    PostSmaller,
    /// `post` is stochastically larger than `pre`.
    PostLarger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// Pairs `(a in pre, b in post)` with `b < a`, plus one half per tie.
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatConfig {
    /// Minimum relative median improvement.
    pub delta: f64,
    /// Significance level; the p-value must be strictly below it.
    pub alpha: f64,
    pub exact_threshold: usize,
}

impl Default for StatConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            alpha: 0.05,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

impl StatConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(StatsError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(StatsError::InvalidConfig(format!(
                "delta must be a finite non-negative number, got {}",
                self.delta
            )));
        }
        if self.exact_threshold == 0 {
            return Err(StatsError::InvalidConfig(
                "exact_threshold must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The improvement rule on already-computed statistics.
    pub fn is_significant(&self, relative_improvement: f64, p_value: f64) -> bool {
        relative_improvement >= self.delta && p_value < self.alpha
    }
}

/// Per-test timing samples for the original (`pre`) and patched (`post`)
/// versions, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSeries {
    pub test_name: String,
    pub pre_ms: Vec<f64>,
    pub post_ms: Vec<f64>,
}

impl TimingSeries {
    pub fn validate(&self) -> Result<(), StatsError> {
        check_sample("pre", &self.pre_ms)?;
        check_sample("post", &self.post_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub relative_improvement: f64,
    pub significant: bool,
    pub method: Method,
}

fn check_sample(which: &'static str, xs: &[f64]) -> Result<(), StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptySample(which));
    }
    if let Some(&value) = xs.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(StatsError::InvalidDuration { which, value });
    }
    Ok(())
}

/// Counts pairs `(a, b)` with `b < a`, adding one half for each tie.
pub fn u_statistic(pre: &[f64], post: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in pre {
        for &b in post {
            if b < a {
                twice += 2;
            } else if b == a {
                twice += 1;
            }
        }
    }
    twice as f64 / 2.0
}

/// One-sided test that `post` is faster than `pre`, with the default exact threshold.
pub fn mann_whitney_one_sided(pre: &[f64], post: &[f64]) -> Result<MannWhitney, StatsError> {
    mann_whitney(pre, post, Alternative::PostSmaller, DEFAULT_EXACT_THRESHOLD)
}

pub fn mann_whitney(
    pre: &[f64],
    post: &[f64],
    alternative: Alternative,
    exact_threshold: usize,
) -> Result<MannWhitney, StatsError> {
    check_sample("pre", pre)?;
    check_sample("post", post)?;
    let n = pre.len();
    let m = post.len();
    let u = u_statistic(pre, post);
    let tie_groups = tie_group_sizes(pre, post);
    let tie_free = tie_groups.iter().all(|&t| t == 1);

    let exact = tie_free && n.saturating_mul(m) <= exact_threshold;
    let p = if exact {
        // U is an integer when there are no ties.
        let observed = u as usize;
        match alternative {
            Alternative::PostSmaller => NullDistribution::new(n, m).upper_tail(observed),
            Alternative::PostLarger => NullDistribution::new(n, m).lower_tail(observed),
        }
    } else {
        normal_tail(u, n, m, &tie_groups, alternative)
    };
    Ok(MannWhitney {
        u_statistic: u,
        p_value: p.clamp(0.0, 1.0),
        method: if exact { Method::Exact } else { Method::NormalApprox },
    })
}

fn tie_group_sizes(pre: &[f64], post: &[f64]) -> Vec<usize> {
    let mut all: Vec<f64> = pre.iter().chain(post).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

fn normal_tail(u: f64, n: usize, m: usize, ties: &[usize], alternative: Alternative) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let mean = nf * mf / 2.0;
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let variance = if total > 1.0 {
        nf * mf / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)))
    } else {
        0.0
    };
    if variance <= 0.0 {
        // Every observation tied: no evidence in either direction.
        return 1.0;
    }
    let sd = variance.sqrt();
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    match alternative {
        Alternative::PostSmaller => {
            let z = (u - mean - 0.5) / sd;
            standard.sf(z)
        }
        Alternative::PostLarger => {
            let z = (u - mean + 0.5) / sd;
            standard.cdf(z)
        }
    }
}

/// Null distribution of U for sample sizes `(n, m)` over `u = 0..=n*m`.
///
/// Counts are accumulated exactly in `u128` while the total number of
/// arrangements fits; larger problems fall back to a probability recurrence.
#[derive(Debug, Clone)]
pub struct NullDistribution {
    n: usize,
    m: usize,
    probabilities: Vec<f64>,
    counts: Option<(Vec<u128>, u128)>,
}

impl NullDistribution {
    pub fn new(n: usize, m: usize) -> Self {
        match exact_counts(n, m) {
            Some(counts) => {
                let total: u128 = counts.iter().sum();
                let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
                Self { n, m, probabilities, counts: Some((counts, total)) }
            }
            None => Self { n, m, probabilities: probability_recurrence(n, m), counts: None },
        }
    }

    pub fn max_u(&self) -> usize {
        self.n * self.m
    }

    /// `P(U = u)`.
    pub fn pmf(&self, u: usize) -> f64 {
        self.probabilities.get(u).copied().unwrap_or(0.0)
    }

    /// `P(U >= u)`.
    pub fn upper_tail(&self, u: usize) -> f64 {
        if u > self.max_u() {
            return 0.0;
        }
        match &self.counts {
            Some((counts, total)) => {
                let hits: u128 = counts[u..].iter().sum();
                hits as f64 / *total as f64
            }
            None => self.probabilities[u..].iter().sum::<f64>().min(1.0),
        }
    }

    /// `P(U <= u)`.
    pub fn lower_tail(&self, u: usize) -> f64 {
        let end = u.min(self.max_u());
        match &self.counts {
            Some((counts, total)) => {
                let hits: u128 = counts[..=end].iter().sum();
                hits as f64 / *total as f64
            }
            None => self.probabilities[..=end].iter().sum::<f64>().min(1.0),
        }
    }
}

// The largest observation belongs either to `pre` (beating all `j` post
// values) or to `post` (beating none), giving
// N(i, j)[k] = N(i-1, j)[k-j] + N(i, j-1)[k].
fn exact_counts(n: usize, m: usize) -> Option<Vec<u128>> {
    let mut prev: Vec<Vec<u128>> = vec![vec![1]; n + 1];
    for j in 1..=m {
        let mut cur: Vec<Vec<u128>> = Vec::with_capacity(n + 1);
        cur.push(vec![1]);
        for i in 1..=n {
            let mut row = vec![0u128; i * j + 1];
            for (k, &c) in cur[i - 1].iter().enumerate() {
                row[k + j] = c;
            }
            for (k, &c) in prev[i].iter().enumerate() {
                row[k] = row[k].checked_add(c)?;
            }
            cur.push(row);
        }
        prev = cur;
    }
    prev.pop()
}

fn probability_recurrence(n: usize, m: usize) -> Vec<f64> {
    let mut prev: Vec<Vec<f64>> = vec![vec![1.0]; n + 1];
    for j in 1..=m {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        cur.push(vec![1.0]);
        for i in 1..=n {
            let w_pre = i as f64 / (i + j) as f64;
            let w_post = j as f64 / (i + j) as f64;
            let mut row = vec![0.0; i * j + 1];
            for (k, &p) in cur[i - 1].iter().enumerate() {
                row[k + j] = w_pre * p;
            }
            for (k, &p) in prev[i].iter().enumerate() {
                row[k] += w_post * p;
            }
            cur.push(row);
        }
        prev = cur;
    }
    prev.pop().unwrap_or_default()
}

/// Median; an even-length sample takes the mean of its two central values.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}

/// `(median(pre) - median(post)) / median(pre)`; positive means faster.
pub fn relative_improvement(pre: &[f64], post: &[f64]) -> Result<f64, StatsError> {
    check_sample("pre", pre)?;
    check_sample("post", post)?;
    let before = median(pre).expect("non-empty");
    let after = median(post).expect("non-empty");
    Ok((before - after) / before)
}

pub fn judge(series: &TimingSeries, config: &StatConfig) -> Result<SignificanceResult, StatsError> {
    series.validate()?;
    let test = mann_whitney(
        &series.pre_ms,
        &series.post_ms,
        Alternative::PostSmaller,
        config.exact_threshold,
    )?;
    let improvement = relative_improvement(&series.pre_ms, &series.post_ms)?;
    Ok(SignificanceResult {
        u_statistic: test.u_statistic,
        p_value: test.p_value,
        relative_improvement: improvement,
        significant: config.is_significant(improvement, test.p_value),
        method: test.method,
    })
}

/// Classifier quality against manual labels. Undefined ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(tp: u64, fp: u64, fn_: u64, _tn: u64) -> PrecisionRecall {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates every assignment of the combined ranks `0..n+m` to the
    /// `pre` sample and counts those whose U reaches `observed`.
    fn brute_force_upper(n: usize, m: usize, observed: usize) -> f64 {
        let total = n + m;
        let mut hits = 0u64;
        let mut all = 0u64;
        for mask in 0u32..(1 << total) {
            if mask.count_ones() as usize != n {
                continue;
            }
            all += 1;
            let mut u = 0;
            let mut post_below = 0;
            for pos in 0..total {
                if mask & (1 << pos) != 0 {
                    u += post_below;
                } else {
                    post_below += 1;
                }
            }
            if u >= observed {
                hits += 1;
            }
        }
        hits as f64 / all as f64
    }

    #[test]
    fn brute_force_oracle_matches_hand_counts() {
        // C(6,3) = 20 and C(8,4) = 70 arrangements, one of each at the maximum.
        assert_eq!(brute_force_upper(3, 3, 9), 1.0 / 20.0);
        assert_eq!(brute_force_upper(4, 4, 16), 1.0 / 70.0);
    }

    #[test]
    fn derived_exact_values() {
        let r = mann_whitney_one_sided(&[10.0, 12.0, 14.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.u_statistic, 9.0);
        assert_eq!(r.method, Method::Exact);
        assert_eq!(r.p_value, 1.0 / 20.0);

        let r = mann_whitney_one_sided(&[5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.u_statistic, 16.0);
        assert_eq!(r.p_value, 1.0 / 70.0);
    }

    #[test]
    fn identical_samples_are_not_significant() {
        let xs = [3.0, 4.0, 5.0, 6.0, 7.0];
        let r = mann_whitney_one_sided(&xs, &xs).unwrap();
        assert_eq!(r.u_statistic, 12.5);
        assert_eq!(r.method, Method::NormalApprox);
        assert!(r.p_value >= 0.5);
        let series = TimingSeries { test_name: "t".into(), pre_ms: xs.to_vec(), post_ms: xs.to_vec() };
        assert!(!judge(&series, &StatConfig::default()).unwrap().significant);
    }

    #[test]
    fn all_tied_sample_gives_unit_p() {
        let r = mann_whitney_one_sided(&[2.0; 4], &[2.0; 3]).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn null_distribution_sums_to_one() {
        for (n, m) in [(1, 1), (3, 5), (8, 8), (30, 30)] {
            let d = NullDistribution::new(n, m);
            let s: f64 = (0..=n * m).map(|u| d.pmf(u)).sum();
            assert!((s - 1.0).abs() < 1e-12, "{n}x{m}: {s}");
            assert_eq!(d.upper_tail(0), 1.0);
        }
    }

    #[test]
    fn probability_recurrence_agrees_with_counts() {
        let counts = exact_counts(7, 9).unwrap();
        let total: u128 = counts.iter().sum();
        let probs = probability_recurrence(7, 9);
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / total as f64 - p).abs() < 1e-14);
        }
    }

    #[test]
    fn large_problems_fall_back_to_probabilities() {
        // C(260, 130) overflows u128.
        assert!(exact_counts(130, 130).is_none());
        let d = NullDistribution::new(100, 100);
        assert!((d.upper_tail(5000) - (0.5 + d.pmf(5000) / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn normal_approximation_beyond_threshold() {
        let pre: Vec<f64> = (0..120).map(|i| 100.0 + i as f64 * 0.01).collect();
        let post: Vec<f64> = (0..120).map(|i| 90.0 + i as f64 * 0.01).collect();
        let r = mann_whitney_one_sided(&pre, &post).unwrap();
        assert_eq!(r.method, Method::NormalApprox);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn rejects_bad_samples() {
        assert_eq!(mann_whitney_one_sided(&[], &[1.0]), Err(StatsError::EmptySample("pre")));
        assert!(matches!(
            mann_whitney_one_sided(&[1.0], &[0.0]),
            Err(StatsError::InvalidDuration { which: "post", .. })
        ));
        assert!(relative_improvement(&[1.0], &[]).is_err());
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement(&[100.0], &[94.0]).unwrap() - 0.06).abs() < 1e-15);
        assert_eq!(relative_improvement(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), 0.0);
        assert!((relative_improvement(&[90.0, 110.0], &[110.0]).unwrap() + 0.10).abs() < 1e-15);
    }

    #[test]
    fn precision_recall_examples() {
        let pr = precision_recall(13, 2, 18, 372);
        assert!((pr.precision.unwrap() - 0.8667).abs() < 5e-5);
        assert!((pr.recall.unwrap() - 0.4194).abs() < 5e-5);
        assert_eq!(precision_recall(0, 0, 5, 10).precision, None);
        assert_eq!(precision_recall(7, 0, 0, 0), PrecisionRecall { precision: Some(1.0), recall: Some(1.0) });
    }

    #[test]
    fn config_validation() {
        assert!(StatConfig::default().validate().is_ok());
        assert!(StatConfig { alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(StatConfig { delta: -0.1, ..Default::default() }.validate().is_err());
    }

    fn distinct_sample(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1..=max, 1..=max).prop_flat_map(|(n, m)| {
            proptest::sample::subsequence((1..=200u32).collect::<Vec<_>>(), n + m)
                .prop_shuffle()
                .prop_map(move |values| {
                    let values: Vec<f64> = values.into_iter().map(f64::from).collect();
                    (values[..n].to_vec(), values[n..].to_vec())
                })
        })
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration((pre, post) in distinct_sample(8)) {
            let r = mann_whitney_one_sided(&pre, &post).unwrap();
            prop_assert_eq!(r.method, Method::Exact);
            let oracle = brute_force_upper(pre.len(), post.len(), r.u_statistic as usize);
            prop_assert!((r.p_value - oracle).abs() <= 1e-12);
        }

        #[test]
        fn rank_invariance((pre, post) in distinct_sample(8)) {
            let transform = |xs: &[f64]| xs.iter().map(|x| x.powf(1.7) + 3.0).collect::<Vec<_>>();
            let a = mann_whitney_one_sided(&pre, &post).unwrap();
            let b = mann_whitney_one_sided(&transform(&pre), &transform(&post)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn complement_law((pre, post) in distinct_sample(8)) {
            let less = mann_whitney(&pre, &post, Alternative::PostSmaller, 10_000).unwrap();
            let greater = mann_whitney(&pre, &post, Alternative::PostLarger, 10_000).unwrap();
            let at = NullDistribution::new(pre.len(), post.len()).pmf(less.u_statistic as usize);
            prop_assert!((less.p_value + greater.p_value - (1.0 + at)).abs() < 1e-12);
        }

        #[test]
        fn p_value_in_unit_interval(
            pre in proptest::collection::vec(1u8..4, 1..40),
            post in proptest::collection::vec(1u8..4, 1..40),
        ) {
            let pre: Vec<f64> = pre.into_iter().map(f64::from).collect();
            let post: Vec<f64> = post.into_iter().map(f64::from).collect();
            for alt in [Alternative::PostSmaller, Alternative::PostLarger] {
                let r = mann_whitney(&pre, &post, alt, 10_000).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.p_value));
                prop_assert!(r.u_statistic <= (pre.len() * post.len()) as f64);
            }
        }

        #[test]
        fn raising_delta_never_adds_significance(
            imp in -0.5f64..0.5, p in 0.0f64..1.0, d1 in 0.0f64..0.5, d2 in 0.0f64..0.5,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let strict = StatConfig { delta: hi, ..Default::default() };
            let loose = StatConfig { delta: lo, ..Default::default() };
            prop_assert!(!strict.is_significant(imp, p) || loose.is_significant(imp, p));
        }
    }
}
