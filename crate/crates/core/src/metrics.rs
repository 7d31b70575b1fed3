//! Classification metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions vs {} labels", pred.len(), labels.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Binary ROC-AUC: probability a random positive outscores a random negative, ties counted half.
/// Computed by rank counting after a sort, in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "roc_auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score in roc_auc".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs both positive and negative labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // 2 * (wins + ties / 2), kept integral
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u128, 0u128);
        for &k in &idx[i..j] {
            if labels[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        twice += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Macro one-vs-rest AUC over classes that have both positives and negatives.
pub fn macro_auc(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = probs.cols();
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..c {
        let bin: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, k)).collect();
        match roc_auc(&scores, &bin) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("no class has both outcomes".into()));
    }
    Ok(total / used as f64)
}

/// `m[true][pred]` counts.
pub fn confusion(pred: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != labels.len() {
        return Err(Error::dim("confusion", "length mismatch".to_string()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::Index(format!("class {} >= {classes}", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_example() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
    }

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.3, 0.8, 0.9], &l).unwrap(), 0.0);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn argmax_ties_low() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]);
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn confusion_counts() {
        let m = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(m, vec![vec![1, 1], vec![0, 1]]);
    }
}
