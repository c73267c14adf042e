//! Confusion counts, positive-class F1 and the Wilcoxon signed-rank test.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassLabel, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label {0} is outside the class list")]
    UnknownClass(usize),
    #[error("every difference is zero")]
    AllTies,
    #[error("non-finite value in pair {0}")]
    NonFinite(usize),
}

/// Counts indexed `[row][gold]`. Rows `0..n_classes` are predicted labels;
/// row `n_classes` holds abstentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes + 1],
        }
    }

    fn row(&self, p: Prediction) -> usize {
        p.label().unwrap_or(self.n_classes)
    }

    pub fn get(&self, predicted: Prediction, gold: usize) -> u64 {
        self.counts[self.row(predicted)][gold]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn abstentions(&self) -> u64 {
        self.counts[self.n_classes].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes).map(|c| self.counts[c][c]).sum()
    }

    /// One-vs-rest counts for `positive`. Abstentions on positive gold are
    /// false negatives.
    pub fn binary(&self, positive: usize) -> BinaryCounts {
        let mut b = BinaryCounts::default();
        for (row, counts) in self.counts.iter().enumerate() {
            for (gold, &n) in counts.iter().enumerate() {
                match (row == positive, gold == positive) {
                    (true, true) => b.tp += n,
                    (true, false) => b.fp += n,
                    (false, true) => b.fn_ += n,
                    (false, false) => b.tn += n,
                }
            }
        }
        b
    }
}

pub fn confusion(preds: &[Prediction], golds: &[usize], n_classes: usize) -> Result<Confusion, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut c = Confusion::new(n_classes);
    for (&p, &g) in preds.iter().zip(golds) {
        if g >= n_classes {
            return Err(MetricsError::UnknownClass(g));
        }
        if let Prediction::Label(l) = p {
            if l >= n_classes {
                return Err(MetricsError::UnknownClass(l));
            }
        }
        let row = c.row(p);
        c.counts[row][g] += 1;
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio_or_zero(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

impl BinaryCounts {
    pub fn precision(&self) -> Ratio<u64> {
        ratio_or_zero(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Ratio<u64> {
        ratio_or_zero(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, 0 when both are 0. Written as
    /// `2TP / (2TP + FP + FN)`, which is the same quantity whenever `TP > 0`.
    pub fn f1(&self) -> Ratio<u64> {
        if self.tp == 0 {
            return Ratio::from_integer(0);
        }
        Ratio::new(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

pub fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Exact F1 of the `positive` class.
pub fn f1_exact(c: &Confusion, positive: usize) -> Ratio<u64> {
    c.binary(positive).f1()
}

pub fn f1_binary(c: &Confusion, positive: usize) -> f64 {
    to_f64(f1_exact(c, positive))
}

/// Positive-class F1 straight from predictions.
pub fn f1_score(preds: &[Prediction], golds: &[usize], n_classes: usize, positive: usize) -> Result<f64, MetricsError> {
    Ok(f1_binary(&confusion(preds, golds, n_classes)?, positive))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassLabel>,
    pub positive_class: usize,
    pub n_examples: u64,
    pub n_parse_failures: u64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn new(
        preds: &[Prediction],
        golds: &[usize],
        classes: &[ClassLabel],
        positive: usize,
    ) -> Result<Self, MetricsError> {
        if positive >= classes.len() {
            return Err(MetricsError::UnknownClass(positive));
        }
        let c = confusion(preds, golds, classes.len())?;
        let b = c.binary(positive);
        let n = c.total();
        Ok(Self {
            classes: classes.to_vec(),
            positive_class: positive,
            n_examples: n,
            n_parse_failures: c.abstentions(),
            precision: to_f64(b.precision()),
            recall: to_f64(b.recall()),
            f1: to_f64(b.f1()),
            accuracy: to_f64(ratio_or_zero(c.correct(), n)),
            confusion: c,
        })
    }

    /// Confusion grid with gold classes as columns, then the headline numbers.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(0).max(9);
        let _ = write!(out, "{:<w$}", "pred\\gold");
        for c in &self.classes {
            let _ = write!(out, " {:>w$}", c.name);
        }
        out.push('\n');
        for (row, counts) in self.confusion.counts.iter().enumerate() {
            let name = self.classes.get(row).map_or("abstain", |c| c.name.as_str());
            let _ = write!(out, "{name:<w$}");
            for n in counts {
                let _ = write!(out, " {n:>w$}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "n={} parse_failures={} positive={} precision={:.4} recall={:.4} f1={:.4} accuracy={:.4}",
            self.n_examples,
            self.n_parse_failures,
            self.classes[self.positive_class].name,
            self.precision,
            self.recall,
            self.f1,
            self.accuracy
        );
        out
    }
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub f1: f64,
}

/// Fixed-width `method | dataset | F1` table.
pub fn render_table(rows: &[ResultRow]) -> String {
    let mw = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
    let dw = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max("Dataset".len());
    let mut out = format!("{:<mw$}  {:<dw$}  {:>6}\n", "Method", "Dataset", "F1");
    out.push_str(&format!("{}  {}  {}\n", "-".repeat(mw), "-".repeat(dw), "-".repeat(6)));
    for r in rows {
        out.push_str(&format!("{:<mw$}  {:<dw$}  {:>6.2}\n", r.method, r.dataset, r.f1));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    /// Non-zero differences used.
    pub n: usize,
    /// P(W+ >= statistic) under random signs.
    pub one_sided_p: f64,
    pub method: PMethod,
}

/// Largest n handled exactly; counts of sign assignments fit in `u128`.
pub const EXACT_MAX_N: usize = 120;

/// Average ranks of `values` (1-based), doubled so they stay integral.
pub fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // average of ranks i+1..=j+1, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided signed-rank test of whether the first value of each pair
/// exceeds the second. Zero differences are dropped and tied magnitudes get
/// average ranks. Exact for up to [`EXACT_MAX_N`] differences, normal
/// approximation with tie and continuity correction beyond.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<Wilcoxon, MetricsError> {
    if let Some(i) = pairs.iter().position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(MetricsError::AllTies);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let observed: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let statistic = observed as f64 / 2.0;
    if n <= EXACT_MAX_N {
        let total: u64 = ranks.iter().sum();
        // ways[s] = number of sign assignments whose doubled W+ equals s
        let mut ways = vec![0u128; total as usize + 1];
        ways[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if ways[s] != 0 {
                    ways[s + r] += ways[s];
                }
            }
            reach += r;
        }
        let at_least: u128 = ways[observed as usize..].iter().sum();
        let p = at_least as f64 / 2f64.powi(n as i32);
        return Ok(Wilcoxon {
            statistic,
            n,
            one_sided_p: p.clamp(0.0, 1.0),
            method: PMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (statistic - mean - 0.5) / var.sqrt();
    Ok(Wilcoxon {
        statistic,
        n,
        one_sided_p: (0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0),
        method: PMethod::Normal,
    })
}

/// Complementary error function (Numerical Recipes `erfcc`, |error| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 { r } else { 2.0 - r }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(x: usize) -> Prediction {
        Prediction::Label(x)
    }

    #[test]
    fn perfect_agreement_is_diagonal() {
        let golds = [0, 1, 1, 0, 1];
        let preds: Vec<_> = golds.iter().map(|&g| l(g)).collect();
        let c = confusion(&preds, &golds, 2).unwrap();
        assert_eq!(c.counts, vec![vec![2, 0], vec![0, 3], vec![0, 0]]);
        assert_eq!(f1_binary(&c, 1), 1.0);
    }

    #[test]
    fn abstention_lands_in_its_own_row() {
        let c = confusion(&[Prediction::Abstain, l(1)], &[1, 1], 2).unwrap();
        assert_eq!(c.abstentions(), 1);
        assert_eq!(c.binary(1), BinaryCounts { tp: 1, fp: 0, fn_: 1, tn: 0 });
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            confusion(&[l(0)], &[0, 1], 2),
            Err(MetricsError::LengthMismatch { preds: 1, golds: 2 })
        );
    }

    #[test]
    fn f1_arithmetic() {
        let b = BinaryCounts { tp: 3, fp: 1, fn_: 2, tn: 0 };
        assert_eq!(b.precision(), Ratio::new(3, 4));
        assert_eq!(b.recall(), Ratio::new(3, 5));
        assert_eq!(b.f1(), Ratio::new(2, 3));
        assert_eq!(BinaryCounts { tp: 0, fp: 4, fn_: 2, tn: 1 }.f1(), Ratio::from_integer(0));
        assert_eq!(BinaryCounts { tp: 2, fp: 0, fn_: 0, tn: 0 }.f1(), Ratio::from_integer(1));
    }

    #[test]
    fn wilcoxon_known_values() {
        let six: Vec<(f64, f64)> = (1..=6).map(|i| (0.5 + i as f64 / 100.0, 0.5)).collect();
        let w = wilcoxon_signed_rank(&six).unwrap();
        assert_eq!(w.one_sided_p, 1.0 / 64.0);
        assert_eq!(w.statistic, 21.0);
        let w = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(w.one_sided_p, 0.75);
        assert_eq!(wilcoxon_signed_rank(&[(1.0, 1.0)]), Err(MetricsError::AllTies));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(doubled_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![7, 2, 7, 4]);
    }

    #[test]
    fn normal_branch_is_close_to_exact_at_the_boundary() {
        let pairs: Vec<(f64, f64)> = (0..=EXACT_MAX_N)
            .map(|i| (if i % 3 == 0 { -1.0 } else { 1.0 } * (i as f64 + 1.0), 0.0))
            .collect();
        let approx = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(approx.method, PMethod::Normal);
        let exact = wilcoxon_signed_rank(&pairs[..EXACT_MAX_N]).unwrap();
        assert!((approx.one_sided_p - exact.one_sided_p).abs() < 0.02);
    }

    #[test]
    fn report_and_table() {
        let classes = crate::domain::class_list(&["False", "True"]).unwrap();
        let r = EvalReport::new(&[l(1), l(0), Prediction::Abstain], &[1, 0, 1], &classes, 1).unwrap();
        assert_eq!(r.n_examples, 3);
        assert_eq!(r.n_parse_failures, 1);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.render().contains("abstain"));
        let t = render_table(&[ResultRow {
            method: "CE+MoE".into(),
            dataset: "toy".into(),
            f1: 0.861,
        }]);
        assert!(t.lines().nth(2).unwrap().ends_with("  0.86"));
    }

    proptest! {
        #[test]
        fn f1_symmetric_under_fp_fn_swap(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let a = BinaryCounts { tp, fp, fn_, tn: 0 };
            let b = BinaryCounts { tp, fp: fn_, fn_: fp, tn: 0 };
            prop_assert_eq!(a.precision(), b.recall());
            prop_assert_eq!(a.f1(), b.f1());
        }

        #[test]
        fn reported_reals_in_unit_interval(pairs in prop::collection::vec((0usize..3, 0usize..2), 1..40)) {
            let classes = crate::domain::class_list(&["a", "b"]).unwrap();
            let preds: Vec<_> = pairs.iter().map(|&(p, _)| if p == 2 { Prediction::Abstain } else { l(p) }).collect();
            let golds: Vec<_> = pairs.iter().map(|&(_, g)| g).collect();
            let r = EvalReport::new(&preds, &golds, &classes, 1).unwrap();
            for x in [r.precision, r.recall, r.f1, r.accuracy] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert_eq!(r.confusion.total(), golds.len() as u64);
        }

        #[test]
        fn wilcoxon_p_in_unit_interval(d in prop::collection::vec(-5i32..5, 1..15)) {
            let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x as f64, 0.0)).collect();
            match wilcoxon_signed_rank(&pairs) {
                Ok(w) => prop_assert!((0.0..=1.0).contains(&w.one_sided_p)),
                Err(e) => prop_assert_eq!(e, MetricsError::AllTies),
            }
        }
    }
}
