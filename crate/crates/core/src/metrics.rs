//! Evaluation metrics over logits and multi-hot targets.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let [n, c] = t.dims2()?;
    Ok((n, c, t.data().iter().map(|v| v.to_f64_lossy()).collect()))
}

/// Fraction of rows whose top-scoring class is the top target class.
pub fn accuracy<T: Real>(scores: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    if scores.shape() != targets.shape() {
        return shape_err(format!("scores {:?} vs targets {:?}", scores.shape(), targets.shape()));
    }
    let (n, c, s) = rows(scores)?;
    let (_, _, t) = rows(targets)?;
    let hits = (0..n)
        .filter(|&i| argmax(&s[i * c..(i + 1) * c]) == argmax(&t[i * c..(i + 1) * c]))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Average precision of one class: `Σ_k (R_k − R_{k−1})·P_k` over distinct
/// score thresholds, highest first. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total as f64;
        ap += (recall - last_recall) * tp as f64 / seen as f64;
        last_recall = recall;
    }
    Some(ap)
}

/// Class-mean average precision; targets `≥ 0.5` count as positive and
/// classes without positives are skipped.
pub fn mean_average_precision<T: Real>(scores: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    if scores.shape() != targets.shape() {
        return shape_err(format!("scores {:?} vs targets {:?}", scores.shape(), targets.shape()));
    }
    let (n, c, s) = rows(scores)?;
    let (_, _, t) = rows(targets)?;
    let mut sum = 0.0;
    let mut classes = 0;
    for k in 0..c {
        let col: Vec<f64> = (0..n).map(|i| s[i * c + k]).collect();
        let pos: Vec<bool> = (0..n).map(|i| t[i * c + k] >= 0.5).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            sum += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return shape_err("no class has a positive target");
    }
    Ok(sum / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let s = Tensor::new(vec![3, 2], vec![2.0, -1.0, -3.0, 4.0, 1.0, 0.5]).unwrap();
        assert_eq!(mean_average_precision(&s, &t).unwrap(), 1.0);
        assert_eq!(accuracy(&s.clone(), &t).unwrap(), 1.0);
    }

    #[test]
    fn known_average_precision() {
        // ranks: P, N, P → (1/2)·1 + (1/2)·(2/3)
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        // a tie of one positive and one negative counts as precision 1/2
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(ap, 0.5);
        assert!(average_precision(&[0.1], &[false]).is_none());
    }

    #[test]
    fn accuracy_counts_rows() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&s, &t).unwrap(), 0.5);
    }
}
