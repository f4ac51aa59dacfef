//! Classification metrics.

use crate::error::{ensure, Error, Result};

/// `P(score⁺ > score⁻) + ½·P(tie)` via average ranks.
pub fn metric_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "{} scores for {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), "AUC scores contain NaN");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&t| labels[t]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of one-vs-rest AUCs; `probs[i][c]` scores bag `i` for
/// class `c`. Equals the binary AUC on class 1 when `k = 2`.
pub fn auc_macro_ovr(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    ensure!(probs.len() == labels.len(), "{} score rows for {} labels", probs.len(), labels.len());
    ensure!(probs.iter().all(|p| p.len() == classes), "score rows must have {classes} entries");
    if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return metric_auc(&s, &l);
    }
    let mut total = 0.0;
    for c in 0..classes {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += metric_auc(&s, &l)?;
    }
    Ok(total / classes as f64)
}

/// Accuracy and macro F1; a class never predicted nor present scores 0.
pub fn metric_acc_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    ensure!(pred.len() == truth.len(), "{} predictions for {} labels", pred.len(), truth.len());
    ensure!(!pred.is_empty(), "metrics over zero examples");
    ensure!(pred.iter().chain(truth).all(|&y| y < classes), "label outside 0..{classes}");
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    Ok((correct as f64 / pred.len() as f64, f1_sum / classes as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub acc: f64,
    pub macro_f1: f64,
    /// True-label count per class.
    pub class_counts: Vec<usize>,
    pub seed: u64,
    pub fingerprint: String,
}

impl MetricReport {
    /// `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let auc_name = if self.class_counts.len() > 2 { "auc_macro_ovr" } else { "auc" };
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("{auc_name},{}\n", self.auc));
        s.push_str(&format!("acc,{}\n", self.acc));
        s.push_str(&format!("macro_f1,{}\n", self.macro_f1));
        for (c, n) in self.class_counts.iter().enumerate() {
            s.push_str(&format!("count_class_{c},{n}\n"));
        }
        s.push_str(&format!("seed,{}\n", self.seed));
        s.push_str(&format!("config,{}\n", self.fingerprint));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(metric_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(metric_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(metric_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(metric_auc(&[0.3, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn acc_f1_examples() {
        assert_eq!(metric_acc_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), (1.0, 1.0));
        assert_eq!(metric_acc_f1(&[1, 0], &[0, 1], 2).unwrap(), (0.0, 0.0));
        let (acc, f1) = metric_acc_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(acc, 0.75);
        assert!((f1 - (2.0 / 3.0 + 4.0 / 5.0) / 2.0).abs() < 1e-15);
        assert!(metric_acc_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn macro_ovr_three_classes() {
        let probs = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]];
        assert_eq!(auc_macro_ovr(&probs, &[0, 1, 2], 3).unwrap(), 1.0);
    }
}
