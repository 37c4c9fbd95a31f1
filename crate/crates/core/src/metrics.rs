//! Correlation metrics between predicted and reference rasters.
//!
//! Every metric returns `None` when the coefficient is undefined (fewer than
//! two values, a constant argument or a non-finite value).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::grid::LabelGrid;

/// Product-moment correlation, computed with the two-pass formula.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("correlation undefined for a constant argument");
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with tied values sharing their mean rank.
pub fn midranks(a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && a[order[end]] == a[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    pearson(&midranks(a), &midranks(b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KendallVariant {
    /// Tie-corrected in both arguments.
    #[default]
    TauB,
    /// No tie correction.
    TauA,
}

/// Pair statistics behind Kendall's tau.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    /// Total pairs `n(n-1)/2`.
    pub pairs: u64,
    /// Pairs tied in `a`.
    pub tied_a: u64,
    /// Pairs tied in `b`.
    pub tied_b: u64,
    /// Concordant minus discordant pairs.
    pub score: i64,
}

impl PairCounts {
    pub fn tau(&self, variant: KendallVariant) -> Option<f64> {
        match variant {
            KendallVariant::TauA => (self.pairs > 0).then(|| self.score as f64 / self.pairs as f64),
            KendallVariant::TauB => {
                let (da, db) = (self.pairs - self.tied_a, self.pairs - self.tied_b);
                if da == 0 || db == 0 {
                    log::warn!("kendall tau undefined for an all-tied argument");
                    return None;
                }
                Some((self.score as f64 / (da as f64 * db as f64).sqrt()).clamp(-1.0, 1.0))
            }
        }
    }
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (strictly greater before smaller).
fn sort_count_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], &mut buf[..mid]) + sort_count_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Pair counts in `O(n log n)` by sorting on `a` then counting inversions in `b`.
pub fn pair_counts(a: &[f64], b: &[f64]) -> PairCounts {
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = order.iter().map(|&i| a[i]).collect();
    let mut sb: Vec<f64> = order.iter().map(|&i| b[i]).collect();

    let tied_a = tied_pairs(&sa);
    let mut tied_ab = 0u64;
    let mut run = 1u64;
    for w in order.windows(2) {
        if a[w[0]] == a[w[1]] && b[w[0]] == b[w[1]] {
            run += 1;
        } else {
            tied_ab += run * (run - 1) / 2;
            run = 1;
        }
    }
    tied_ab += run * (run - 1) / 2;

    let mut buf = vec![0.0; n];
    let swaps = sort_count_swaps(&mut sb, &mut buf);
    let tied_b = tied_pairs(&sb);
    let pairs = (n as u64) * (n as u64).saturating_sub(1) / 2;
    // concordant - discordant = untied-in-both pairs - 2 * discordant
    let score = pairs as i64 - tied_a as i64 - tied_b as i64 + tied_ab as i64 - 2 * swaps as i64;
    PairCounts {
        pairs,
        tied_a,
        tied_b,
        score,
    }
}

pub fn kendall_with(a: &[f64], b: &[f64], variant: KendallVariant) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    pair_counts(a, b).tau(variant)
}

/// Kendall tau-b.
pub fn kendall(a: &[f64], b: &[f64]) -> Option<f64> {
    kendall_with(a, b, KendallVariant::TauB)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

impl Correlations {
    pub fn compute(a: &[f64], b: &[f64], variant: KendallVariant) -> Self {
        Self {
            pearson: pearson(a, b),
            spearman: spearman(a, b),
            kendall: kendall_with(a, b, variant),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: Correlations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pooled: bool,
    pub kendall_variant: KendallVariant,
    /// Mean over samples, or the pooled coefficients.
    pub summary: Correlations,
    /// Samples left out of each mean because the metric was undefined.
    pub excluded: [usize; 3],
    pub samples: Vec<SampleReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Correlate all cells of all samples at once instead of averaging per sample.
    pub pooled: bool,
    pub kendall: KendallVariant,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut count, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

/// Correlate each `(name, prediction, label)` triple and aggregate.
pub fn evaluate_dataset(samples: &[(String, &LabelGrid, &LabelGrid)], opts: EvalOptions) -> Result<Report> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for (name, pred, label) in samples {
        if (pred.width, pred.height) != (label.width, label.height) {
            return Err(Error::Validation(format!(
                "{name}: prediction {}x{} vs label {}x{}",
                pred.width, pred.height, label.width, label.height
            )));
        }
        reports.push(SampleReport {
            name: name.clone(),
            metrics: Correlations::compute(&pred.to_f64(), &label.to_f64(), opts.kendall),
        });
    }
    let (summary, excluded) = if opts.pooled {
        let a: Vec<f64> = samples.iter().flat_map(|s| s.1.to_f64()).collect();
        let b: Vec<f64> = samples.iter().flat_map(|s| s.2.to_f64()).collect();
        (Correlations::compute(&a, &b, opts.kendall), [0; 3])
    } else {
        let (p, ep) = mean_defined(reports.iter().map(|r| r.metrics.pearson));
        let (s, es) = mean_defined(reports.iter().map(|r| r.metrics.spearman));
        let (k, ek) = mean_defined(reports.iter().map(|r| r.metrics.kendall));
        (
            Correlations {
                pearson: p,
                spearman: s,
                kendall: k,
            },
            [ep, es, ek],
        )
    };
    Ok(Report {
        pooled: opts.pooled,
        kendall_variant: opts.kendall,
        summary,
        excluded,
        samples: reports,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per sample plus the summary.
    pub fn to_table(&self) -> String {
        let width = self.samples.iter().map(|s| s.name.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            "sample", "pearson", "spearman", "kendall"
        );
        let row = |out: &mut String, name: &str, m: &Correlations| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>8}  {:>8}  {:>8}",
                cell(m.pearson),
                cell(m.spearman),
                cell(m.kendall)
            );
        };
        for s in &self.samples {
            row(&mut out, &s.name, &s.metrics);
        }
        let label = if self.pooled { "pooled" } else { "mean" };
        row(&mut out, label, &self.summary);
        if self.excluded.iter().any(|&e| e > 0) {
            let _ = writeln!(
                out,
                "excluded (undefined): pearson {}, spearman {}, kendall {}",
                self.excluded[0], self.excluded[1], self.excluded[2]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_anti() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(pearson(&a, &a), Some(1.0));
        assert_eq!(pearson(&a, &r), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(kendall(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(kendall(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    }

    #[test]
    fn undefined_cases() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
        assert_eq!(kendall(&[2.0, 2.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]), None);
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn tau_a_ignores_ties() {
        let a = [1.0, 1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        assert_eq!(kendall_with(&a, &b, KendallVariant::TauA), Some(2.0 / 3.0));
    }

    #[test]
    fn dataset_mean_and_empty() {
        let a = LabelGrid::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let flat = LabelGrid::new(2, 2, vec![0.5; 4]).unwrap();
        let r = evaluate_dataset(&[("a".into(), &a, &a), ("b".into(), &flat, &a)], EvalOptions::default()).unwrap();
        assert_eq!(r.summary.pearson, Some(1.0));
        assert_eq!(r.excluded, [1, 1, 1]);
        assert!(r.to_table().contains("n/a"));
        assert!(evaluate_dataset(&[], EvalOptions::default()).is_err());
    }
}
