//! Accuracy and average precision.

use crate::error::{Error, Result};

/// Decision threshold; scores `>= TAU` count as fake.
pub const TAU: f64 = 0.5;

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of samples where `(score >= tau) == label`.
pub fn accuracy(scores: &[f64], labels: &[bool], tau: f64) -> Result<f64> {
    check(scores, labels)?;
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s >= tau) == y).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Step-interpolated area under the precision-recall curve.
///
/// Samples are ranked by descending score, ties by original index, and one
/// PR point is emitted per rank. Each positive at rank `k` contributes
/// `(1 / n_pos) * precision@k`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let step = 1.0 / positives as f64;
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += step * (tp as f64 / (rank + 1) as f64);
        }
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[true, false], TAU).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.9], &[true, false], TAU).unwrap(), 0.5);
        let labels = [true, false, true, false];
        assert_eq!(accuracy(&[0.5; 4], &labels, TAU).unwrap(), 0.5);
        assert_eq!(accuracy(&[0.5; 4], &[true, true, true, false], TAU).unwrap(), 0.75);
        assert!(accuracy(&[], &[], TAU).is_err());
        assert!(accuracy(&[0.1], &[true, false], TAU).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert_eq!(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
        assert!((ap - 5.0 / 6.0).abs() <= f64::EPSILON);
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert!(average_precision(&[0.3, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn ties_rank_by_index() {
        // positive first among the tie: precision 1 at rank 1
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }
}
