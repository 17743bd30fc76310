//! Mean-reduced classification losses over the active rows of a split.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Labels, Task};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Multiclass cross-entropy on softmax probabilities.
    SoftmaxCe,
    /// Element-wise binary cross-entropy on sigmoid probabilities.
    BceLogits,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Multiclass => LossKind::SoftmaxCe,
            Task::Multilabel => LossKind::BceLogits,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "bce_logits" => Ok(LossKind::BceLogits),
            other => Err(Error::Input(format!("unknown loss `{other}`"))),
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one row, computed in `f64`.
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss averaged over active rows (and over targets for `BceLogits`) and
/// its gradient with respect to the logits. Inactive rows get zero gradient.
pub fn loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    labels: &Labels,
    active: &[bool],
    kind: LossKind,
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.shape();
    if active.len() != n {
        return Err(shape_err("loss", format!("{} mask entries for {n} rows", active.len())));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    if rows.is_empty() {
        return Err(Error::Input("loss over an empty set of rows".into()));
    }
    let mut grad = Tensor::zeros(n, k);
    let mut total = 0.0;
    match (kind, labels) {
        (LossKind::SoftmaxCe, Labels::Class(y)) => {
            if y.len() != n {
                return Err(shape_err("softmax_ce", format!("{} labels for {n} rows", y.len())));
            }
            let scale = 1.0 / rows.len() as f64;
            for &i in &rows {
                let row = logits.row(i);
                let c = y[i];
                if c >= k {
                    return Err(Error::Input(format!("class {c} out of range for {k} logits")));
                }
                let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
                total += lse - row[c].f64();
                let p = softmax_row(row);
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let t = if j == c { 1.0 } else { 0.0 };
                    *g = T::of((p[j] - t) * scale);
                }
            }
            total *= scale;
        }
        (LossKind::BceLogits, Labels::Multi(y)) => {
            if y.shape() != (n, k) {
                return Err(shape_err("bce_logits", format!("labels {:?} vs logits {:?}", y.shape(), (n, k))));
            }
            let scale = 1.0 / (rows.len() * k) as f64;
            for &i in &rows {
                let yr = y.row(i);
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let l = logits.get(i, j).f64();
                    total += softplus(l) - l * yr[j];
                    *g = T::of((sigmoid(l) - yr[j]) * scale);
                }
            }
            total *= scale;
        }
        (kind, _) => {
            return Err(Error::Input(format!("loss {kind:?} does not match the label type")));
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {total}")));
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{finite_diff_grad, rel_err_vec};

    #[test]
    fn bce_at_zero_is_ln2() {
        let logits = Tensor::<f64>::zeros(3, 2);
        let y = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let (l, _) = loss_and_grad(&logits, &Labels::Multi(y), &[true; 3], LossKind::BceLogits).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_correct_logit_gives_zero_ce() {
        let logits = Tensor::<f64>::from_rows(&[&[1e4, 0.0, -3.0]]);
        let (l, g) = loss_and_grad(&logits, &Labels::Class(vec![0]), &[true], LossKind::SoftmaxCe).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn inactive_rows_do_not_count() {
        let logits = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[100.0, -100.0]]);
        let labels = Labels::Class(vec![1, 1]);
        let (a, g) = loss_and_grad(&logits, &labels, &[true, false], LossKind::SoftmaxCe).unwrap();
        let (b, _) = loss_and_grad(&logits.gather_rows(&[0]), &Labels::Class(vec![1]), &[true], LossKind::SoftmaxCe)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert!(loss_and_grad(&logits, &labels, &[false, false], LossKind::SoftmaxCe).is_err());
    }

    #[test]
    fn mismatched_labels_rejected() {
        let logits = Tensor::<f64>::zeros(1, 2);
        assert!(loss_and_grad(&logits, &Labels::Class(vec![0]), &[true], LossKind::BceLogits).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = Tensor::<f64>::from_rows(&[&[0.3, -1.2, 2.0], &[1.5, 0.1, -0.4], &[-2.0, 0.7, 0.2]]);
        let active = [true, false, true];
        let cases = [
            (Labels::Class(vec![2, 0, 1]), LossKind::SoftmaxCe),
            (
                Labels::Multi(Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]])),
                LossKind::BceLogits,
            ),
        ];
        for (labels, kind) in cases {
            let (_, g) = loss_and_grad(&logits, &labels, &active, kind).unwrap();
            let fd = finite_diff_grad(
                |v| Ok(loss_and_grad(&Tensor::from_vec(3, 3, v.to_vec())?, &labels, &active, kind)?.0),
                &logits.to_f64(),
                1e-5,
            )
            .unwrap();
            assert!(rel_err_vec(&g.to_f64(), &fd) < 1e-8, "{kind:?}");
        }
    }
}
