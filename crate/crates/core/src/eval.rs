//! Binary classification metrics with ASD (label 1) as the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 0 when precision and recall are both 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Asd, Label::Asd) => cm.tp += 1,
            (Label::Asd, Label::Control) => cm.fp += 1,
            (Label::Control, Label::Control) => cm.tn += 1,
            (Label::Control, Label::Asd) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Mann–Whitney statistic `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` via mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Asd).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == Label::Asd).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Area under the threshold-swept ROC curve; tied scores move together.
pub fn roc_auc_trapezoid(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Asd).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == Label::Asd {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / n_pos, fp / n_neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

fn check_scores(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    /// `(fraction of samples examined, fraction of positives found)`.
    pub points: Vec<(f64, f64)>,
    /// Random-ordering diagonal at the same sample fractions.
    pub baseline: Vec<(f64, f64)>,
}

/// Cumulative gain in descending score order; ties keep input order.
pub fn cumulative_gain(scores: &[f64], labels: &[Label]) -> Result<GainCurve> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Asd).count();
    if n_pos == 0 {
        return Err(Error::Data("cumulative gain needs at least one positive".into()));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut found = 0;
    let mut points = Vec::with_capacity(n);
    let mut baseline = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == Label::Asd {
            found += 1;
        }
        let frac = (k + 1) as f64 / n as f64;
        points.push((frac, found as f64 / n_pos as f64));
        baseline.push((frac, frac));
    }
    Ok(GainCurve { points, baseline })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub gain_curve: Option<GainCurve>,
}

pub fn classification_metrics(cm: &ConfusionMatrix, scores: &[f64], labels: &[Label]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Data("no subjects to evaluate".into()));
    }
    if cm.total() != labels.len() {
        return Err(Error::Data(format!(
            "confusion matrix counts {} subjects, labels {}",
            cm.total(),
            labels.len()
        )));
    }
    let both = labels.contains(&Label::Asd) && labels.contains(&Label::Control);
    let auc = if both { Some(roc_auc(scores, labels)?) } else { None };
    let gain_curve = if labels.contains(&Label::Asd) { Some(cumulative_gain(scores, labels)?) } else { None };
    Ok(MetricsReport {
        n: labels.len(),
        accuracy: cm.accuracy(),
        precision: cm.precision(),
        recall: cm.recall(),
        f1: cm.f1(),
        auc,
        confusion: *cm,
        gain_curve,
    })
}

/// Metrics from positive-class probabilities with the `p1 >= p0` rule.
pub fn evaluate_scores(scores: &[f64], labels: &[Label]) -> Result<MetricsReport> {
    let preds: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Label::Asd } else { Label::Control }).collect();
    classification_metrics(&confusion(&preds, labels)?, scores, labels)
}

/// Metrics from `B × 2` log-probabilities.
pub fn evaluate_prediction(pred: &crate::nn::Prediction, labels: &[Label]) -> Result<MetricsReport> {
    let cm = confusion(&pred.predicted(), labels)?;
    classification_metrics(&cm, &pred.positive_scores(), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("nothing to summarise".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Ok(Self {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std,
            n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    /// Over runs whose test set allowed an AUC.
    pub auc: Option<Summary>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Data("no runs to aggregate".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    Ok(Aggregate {
        runs: reports.len(),
        accuracy: Summary::of(&col(|r| r.accuracy))?,
        precision: Summary::of(&col(|r| r.precision))?,
        recall: Summary::of(&col(|r| r.recall))?,
        f1: Summary::of(&col(|r| r.f1))?,
        auc: if aucs.is_empty() { None } else { Some(Summary::of(&aucs)?) },
    })
}

/// Percentage with two decimals, e.g. `96.59%`.
pub fn percent(ratio: f64) -> String {
    format!("{:.2}%", 100.0 * ratio)
}

/// Markdown table: accuracy, precision and recall as percentages, F1 and AUC as ratios.
pub fn render_table(agg: &Aggregate) -> String {
    let mut out = String::from("| Metric | Average | Minimum | Maximum | Standard Deviation |\n");
    out.push_str("|---|---|---|---|---|\n");
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let raw = |v: f64| format!("{v:.4}");
    let mut row = |name: &str, s: &Summary, fmt: &dyn Fn(f64) -> String| {
        let _ = writeln!(out, "| {name} | {} | {} | {} | {} |", fmt(s.mean), fmt(s.min), fmt(s.max), fmt(s.std));
    };
    row("Accuracy", &agg.accuracy, &pct);
    row("Precision", &agg.precision, &pct);
    row("Recall", &agg.recall, &pct);
    row("F1 Score", &agg.f1, &raw);
    if let Some(auc) = &agg.auc {
        row("AUC", auc, &raw);
    }
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use Label::{Asd as P, Control as N};

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| if b == 1 { P } else { N }).collect()
    }

    /// Pair enumeration straight from the definition.
    fn auc_by_pairs(scores: &[f64], labels: &[Label]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if *li == P && *lj == N {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&labels(&[1, 0, 1, 0]), &labels(&[1, 1, 0, 0])).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let all = confusion(&labels(&[1, 0, 0]), &labels(&[1, 0, 0])).unwrap();
        assert_eq!((all.fp, all.fn_), (0, 0));
        assert!(confusion(&labels(&[1]), &labels(&[1, 0])).is_err());
        assert_eq!(serde_json::to_string(&cm).unwrap(), r#"{"tp":1,"fp":1,"tn":1,"fn":1}"#);
    }

    #[test]
    fn best_run_arithmetic() {
        let cm = ConfusionMatrix { tp: 40, fp: 1, tn: 45, fn_: 2 };
        assert_eq!(cm.total(), 88);
        assert_eq!(cm.correct(), 85);
        assert_eq!(percent(cm.accuracy()), "96.59%");
        assert_abs_diff_eq!(100.0 * cm.accuracy(), 96.59, epsilon = 0.01);
    }

    #[test]
    fn metric_examples() {
        let cm = ConfusionMatrix { tp: 3, fp: 1, fn_: 1, tn: 5 };
        assert_abs_diff_eq!(cm.precision(), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(cm.recall(), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(cm.f1(), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(cm.accuracy(), 0.8, epsilon = 1e-15);
        let perfect = ConfusionMatrix { tp: 2, fp: 0, tn: 2, fn_: 0 };
        let r = classification_metrics(&perfect, &[0.9, 0.8, 0.1, 0.2], &labels(&[1, 1, 0, 0])).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0, Some(1.0)));
        let none = ConfusionMatrix { tp: 0, fp: 0, tn: 3, fn_: 2 };
        assert_eq!((none.precision(), none.recall(), none.f1()), (0.0, 0.0, 0.0));
        assert!(classification_metrics(&none, &[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        let l = labels(&[1, 0, 1, 0]);
        assert_abs_diff_eq!(roc_auc(&[0.9, 0.8, 0.4, 0.3], &l).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(roc_auc(&[0.5, 0.6], &labels(&[1, 1])).is_err());
        assert_abs_diff_eq!(roc_auc_trapezoid(&[0.9, 0.8, 0.4, 0.3], &l).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(roc_auc_trapezoid(&[0.5; 4], &l).unwrap(), 0.5);
    }

    #[test]
    fn gain_examples() {
        let g = cumulative_gain(&[0.9, 0.7, 0.6, 0.2], &labels(&[1, 0, 1, 0])).unwrap();
        assert_eq!(g.points, vec![(0.25, 0.5), (0.5, 0.5), (0.75, 1.0), (1.0, 1.0)]);
        assert_eq!(g.baseline[1], (0.5, 0.5));
        let perfect = cumulative_gain(&[4.0, 3.0, 2.0, 1.0], &labels(&[1, 1, 0, 0])).unwrap();
        assert_eq!(perfect.points[1], (0.5, 1.0));
        let worst = cumulative_gain(&[1.0, 2.0, 3.0, 4.0], &labels(&[1, 0, 0, 0])).unwrap();
        assert_eq!(worst.points[2], (0.75, 0.0));
        assert!(cumulative_gain(&[1.0], &labels(&[0])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let rep = |acc: f64| MetricsReport {
            n: 10,
            accuracy: acc,
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
            auc: Some(0.7),
            confusion: ConfusionMatrix::default(),
            gain_curve: None,
        };
        let one = aggregate_runs(&[rep(0.8)]).unwrap();
        assert_eq!((one.accuracy.mean, one.accuracy.min, one.accuracy.max, one.accuracy.std), (0.8, 0.8, 0.8, 0.0));
        let two = aggregate_runs(&[rep(0.8), rep(0.9)]).unwrap();
        assert_abs_diff_eq!(two.accuracy.mean, 0.85, epsilon = 1e-15);
        assert_abs_diff_eq!(two.accuracy.std, 0.07071, epsilon = 1e-5);
        assert!(aggregate_runs(&[]).is_err());
        let table = render_table(&two);
        assert!(table.starts_with("| Metric | Average | Minimum | Maximum | Standard Deviation |"));
        assert!(table.contains("| Accuracy | 85.00 | 80.00 | 90.00 | 7.07 |"), "{table}");
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..60)) {
            let preds = labels(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let truth = labels(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let cm = confusion(&preds, &truth).unwrap();
            let count = |p: Label, l: Label| preds.iter().zip(&truth).filter(|(a, b)| **a == p && **b == l).count();
            prop_assert_eq!(cm.tp, count(P, P));
            prop_assert_eq!(cm.fp, count(P, N));
            prop_assert_eq!(cm.tn, count(N, N));
            prop_assert_eq!(cm.fn_, count(N, P));
            prop_assert_eq!(cm.accuracy(), cm.correct() as f64 / bits.len() as f64);
            let (p, r) = (cm.precision(), cm.recall());
            if p + r > 0.0 {
                prop_assert!((cm.f1() - 2.0 * p * r / (p + r)).abs() <= 1e-12);
            }
        }

        #[test]
        fn auc_implementations_agree(
            data in proptest::collection::vec((0u8..8, 0u8..2), 2..50),
        ) {
            // coarse scores force plenty of ties
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 8.0).collect();
            let l = labels(&data.iter().map(|d| d.1).collect::<Vec<_>>());
            prop_assume!(l.contains(&P) && l.contains(&N));
            let rank = roc_auc(&scores, &l).unwrap();
            prop_assert!((rank - auc_by_pairs(&scores, &l)).abs() <= 1e-12);
            prop_assert!((rank - roc_auc_trapezoid(&scores, &l).unwrap()).abs() <= 1e-9);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((roc_auc(&warped, &l).unwrap() - rank).abs() <= 1e-12);
        }

        #[test]
        fn gain_curve_is_monotone(data in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let l = labels(&data.iter().map(|d| d.1).collect::<Vec<_>>());
            prop_assume!(l.contains(&P));
            let g = cumulative_gain(&scores, &l).unwrap();
            prop_assert!(g.points.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].0 > w[0].0));
            prop_assert_eq!(*g.points.last().unwrap(), (1.0, 1.0));
            prop_assert!((g.points[0].0 - 1.0 / l.len() as f64).abs() < 1e-15);
        }
    }
}
