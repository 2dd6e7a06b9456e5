use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Rows are true labels, columns predicted labels.
pub type Confusion = [[usize; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
}

fn check_inputs(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Config(format!("score {s} outside [0, 1]")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Config(format!("label {l} is not binary")));
    }
    Ok(())
}

/// Hard predictions at 0.5. A score of exactly 0.5 goes to the more
/// frequent label (label 0 when balanced).
pub fn predictions(scores: &[f64], labels: &[usize]) -> Vec<usize> {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let tie = usize::from(2 * ones > labels.len());
    scores
        .iter()
        .map(|&s| match s.partial_cmp(&0.5) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => 0,
            _ => tie,
        })
        .collect()
}

pub fn confusion(scores: &[f64], labels: &[usize]) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut m = [[0; 2]; 2];
    for (p, &l) in predictions(scores, labels).into_iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// Mann–Whitney AUC: the fraction of positive/negative pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Undefined { detail: "AUC needs at least one subject of each class".into() });
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

pub fn compute_metrics(scores: &[f64], labels: &[usize]) -> Result<Metrics> {
    let auc = auc(scores, labels)?;
    let correct = predictions(scores, labels).into_iter().zip(labels).filter(|(p, l)| p == *l).count();
    Ok(Metrics { accuracy: correct as f64 / labels.len() as f64, auc })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let m = compute_metrics(&[0.9, 0.9, 0.1, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.accuracy, m.auc), (1.0, 1.0));
    }

    #[test]
    fn all_ties() {
        let m = compute_metrics(&[0.5; 5], &[1, 1, 1, 0, 0]).unwrap();
        assert_eq!(m.auc, 0.5);
        assert_eq!(m.accuracy, 0.6);
        let m = compute_metrics(&[0.5; 5], &[0, 0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.6);
    }

    #[test]
    fn hand_enumerated_pairs() {
        // positives 0.8, 0.7 against negatives 0.6, 0.2: all four pairs
        // ordered, but the 0.6 negative sits above the 0.5 cut
        let m = compute_metrics(&[0.8, 0.6, 0.7, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.auc), (0.75, 1.0));
        assert_eq!(auc(&[0.3, 0.6, 0.7, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(compute_metrics(&[0.2, 0.7], &[1, 1]), Err(Error::Undefined { .. })));
    }

    #[test]
    fn confusion_counts() {
        let c = confusion(&[0.9, 0.2, 0.6, 0.4], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c, [[1, 1], [1, 1]]);
    }

    #[test]
    fn spread() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
