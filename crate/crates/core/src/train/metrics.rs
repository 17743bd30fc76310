//! Evaluation metrics.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean per-column ROC-AUC (Mann-Whitney U with mid-ranks for ties).
/// Columns without both a positive and a negative are skipped.
pub fn roc_auc(scores: &Tensor<f64>, labels: &Tensor<f64>) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(shape_err("roc_auc", format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape())));
    }
    let (n, t) = scores.shape();
    let mut sum = 0.0;
    let mut valid = 0;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for c in 0..t {
        let pos = (0..n).filter(|&i| labels.get(i, c) == 1.0).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| scores.get(a, c).total_cmp(&scores.get(b, c)));
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && scores.get(order[j], c) == scores.get(order[i], c) {
                j += 1;
            }
            // ranks i+1 ..= j share their mean
            let mid = (i + 1 + j) as f64 / 2.0;
            let tied_pos = order[i..j].iter().filter(|&&r| labels.get(r, c) == 1.0).count();
            rank_sum_pos += mid * tied_pos as f64;
            i = j;
        }
        let (p, q) = (pos as f64, neg as f64);
        sum += (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Metric("no label column has both classes".into()));
    }
    Ok(sum / valid as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max matches the class label.
pub fn accuracy(scores: &Tensor<f64>, classes: &[usize]) -> Result<f64> {
    if scores.rows() != classes.len() {
        return Err(shape_err("accuracy", format!("{} rows vs {} labels", scores.rows(), classes.len())));
    }
    if classes.is_empty() {
        return Err(Error::Metric("accuracy over zero rows".into()));
    }
    let hits = (0..scores.rows()).filter(|&i| argmax(scores.row(i)) == classes[i]).count();
    Ok(hits as f64 / classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    /// Exhaustive pairwise AUC of one column: ties count one half.
    fn pairwise(s: &[f64], y: &[f64]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn worked_example() {
        let auc = roc_auc(&col(&[0.1, 0.4, 0.35, 0.8]), &col(&[0.0, 0.0, 1.0, 1.0])).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(roc_auc(&col(&[0.1, 0.2, 0.9]), &col(&[0.0, 0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&col(&[0.5; 5]), &col(&[0.0, 1.0, 0.0, 1.0, 1.0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_columns_are_skipped() {
        let s = Tensor::from_rows(&[&[0.1, 0.3], &[0.9, 0.2]]);
        let y = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(roc_auc(&s, &y).unwrap(), 1.0);
        assert!(roc_auc(&s, &Tensor::filled(2, 2, 1.0)).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let s = Tensor::from_rows(&[&[0.1, 0.9], &[0.8, 0.2], &[0.5, 0.5]]);
        assert!((accuracy(&s, &[1, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_pairs(
            rows in prop::collection::vec((0u8..6, any::<bool>(), 0u8..4, any::<bool>()), 2..200)
        ) {
            // coarse score grid so that ties are common
            let n = rows.len();
            let s = Tensor::from_vec(n, 2, rows.iter().flat_map(|r| [r.0 as f64 / 5.0, r.2 as f64]).collect()).unwrap();
            let y = Tensor::from_vec(n, 2, rows.iter().flat_map(|r| [r.1 as u8 as f64, r.3 as u8 as f64]).collect()).unwrap();
            let cols: Vec<f64> = (0..2)
                .filter_map(|c| {
                    let sc: Vec<f64> = (0..n).map(|i| s.get(i, c)).collect();
                    let yc: Vec<f64> = (0..n).map(|i| y.get(i, c)).collect();
                    pairwise(&sc, &yc)
                })
                .collect();
            match roc_auc(&s, &y) {
                Ok(auc) => {
                    let want = cols.iter().sum::<f64>() / cols.len() as f64;
                    prop_assert!((auc - want).abs() <= 1e-12, "{auc} vs {want}");
                }
                Err(_) => prop_assert!(cols.is_empty()),
            }
        }
    }
}
