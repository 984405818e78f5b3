//! Classification metrics.

/// Fraction of matching entries; 0 for empty input.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest score, first on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Rank-based area under the ROC curve; tied scores share their average
/// rank, so a tied positive/negative pair counts one half. `Err` when one of
/// the two classes is absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64, String> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err("AUROC is undefined when only one class is present".into());
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
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary AUROC on the positive-class probability for two classes; one-vs-rest
/// macro average over the classes where it is defined otherwise.
pub fn auroc_multiclass(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64, String> {
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auroc(&scores, &positive);
    }
    let defined: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auroc(&scores, &positive).ok()
        })
        .collect();
    if defined.is_empty() {
        return Err("AUROC is undefined when only one class is present".into());
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// F1 from true positives, false positives and false negatives pooled over
/// all instances and classes. 1 when there are no positives at all.
pub fn f1_micro(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean over instances of `2|P∩T| / (|P|+|T|)`; two empty sets score 1.
pub fn f1_sample(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let total: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count();
            let size = p.iter().filter(|&&a| a).count() + t.iter().filter(|&&b| b).count();
            if size == 0 {
                1.0
            } else {
                2.0 * inter as f64 / size as f64
            }
        })
        .sum();
    total / truth.len() as f64
}

/// Indicator vector of a single label.
pub fn one_hot(label: usize, classes: usize) -> Vec<bool> {
    (0..classes).map(|c| c == label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]), Ok(1.0));
        assert_eq!(auroc(&[0.1, 0.9], &[true, false]), Ok(0.0));
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]), Ok(0.5));
        assert!(auroc(&[0.3, 0.4], &[true, true]).is_err());
    }

    #[test]
    fn all_correct() {
        let labels = [0, 2, 1];
        assert_eq!(accuracy(&labels, &labels), 1.0);
        let sets: Vec<Vec<bool>> = labels.iter().map(|&y| one_hot(y, 3)).collect();
        assert_eq!(f1_micro(&sets, &sets), 1.0);
        assert_eq!(f1_sample(&sets, &sets), 1.0);
    }

    #[test]
    fn hand_computed_f1() {
        let pred = vec![vec![true, true, false], vec![false, false, false]];
        let truth = vec![vec![true, false, false], vec![false, false, false]];
        // tp=1 fp=1 fn=0 → 2/3; per instance 2/3 and 1
        assert!((f1_micro(&pred, &truth) - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1_sample(&pred, &truth) - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
