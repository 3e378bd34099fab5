use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_binary(scores: &[f64], labels: &[u32]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", &[scores.len()], &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("binary label expected, found {l}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney `U / (n_pos · n_neg)`; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[u32]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        rank_sum2 += avg2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Fraction of correct calls; a score equal to `threshold` is called positive.
pub fn accuracy(scores: &[f64], labels: &[u32], threshold: f64) -> Result<f64> {
    check_binary(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Macro-averaged one-vs-rest AUROC; `scores[i][c]` is the score of class `c`.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[u32], num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..num_classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let y: Vec<u32> = labels.iter().map(|&l| u32::from(l as usize == c)).collect();
        total += auroc(&s, &y)?;
    }
    Ok(total / num_classes as f64)
}

/// Summary of one metric over repeats, reported as "mean (std)".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricReport {
    pub fn from_values(task: &str, model: &str, metric: &str, k: Option<usize>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("metric report needs at least one value"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        // Rounding can push the mean a hair outside the extremes.
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            task: task.to_string(),
            model: model.to_string(),
            metric: metric.to_string(),
            k,
            mean: mean.clamp(lo, hi),
            std,
            values,
        })
    }

    /// `"mean (std)"` with four decimals.
    pub fn cell(&self) -> String {
        format!("{:.4} ({:.4})", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, proptest};
    use proptest::collection::vec;

    fn brute(scores: &[f64], labels: &[u32]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(auroc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = Rng::new(3);
        for trial in 0..300 {
            let n = 2 + rng.below(40);
            let levels = if trial % 2 == 0 { 3 } else { 1000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let mut labels: Vec<u32> = (0..n).map(|_| rng.below(2) as u32).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert!((auroc(&scores, &labels).unwrap() - brute(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.1, 0.7], &[0, 1, 1], 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(accuracy(&[0.9, 0.1, 0.7], &[1, 0, 0], 0.5).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn macro_auroc_averages_classes() {
        let scores = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8], vec![0.2, 0.7, 0.1]];
        assert_eq!(macro_auroc(&scores, &[0, 1, 2, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn report_summary() {
        let r = MetricReport::from_values("t", "m", "auroc", Some(5), vec![0.5, 0.7, 0.9]).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
        let r = MetricReport::from_values("t", "m", "auroc", None, vec![0.7042 + 0.177, 0.7042 - 0.177]).unwrap();
        assert_eq!(r.cell(), "0.7042 (0.1770)");
        assert!(MetricReport::from_values("t", "m", "auroc", None, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_is_rank_based(raw in vec((-50.0f64..50.0, 0u32..2), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<u32> = raw.iter().map(|r| r.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let warped: Vec<f64> = scores.iter().map(|x| x * x * x + x).collect();
            prop_assert!((a - auroc(&warped, &labels).unwrap()).abs() <= 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let neg: Vec<f64> = scores.iter().map(|x| -x).collect();
                prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn report_mean_within_extremes(values in vec(0.0f64..1.0, 1..20)) {
            let r = MetricReport::from_values("t", "m", "acc", None, values.clone()).unwrap();
            prop_assert!(r.std >= 0.0);
            prop_assert!(values.iter().any(|&v| v <= r.mean) && values.iter().any(|&v| v >= r.mean));
        }
    }
}
