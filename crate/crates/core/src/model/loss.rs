use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Target value for positions that carry no loss.
pub const IGNORE_INDEX: i32 = -100;

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy of `logits` rows against class `targets`, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let m = targets.len();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lp = log_softmax(row.as_slice().expect("contiguous"));
        total -= lp[t];
        for (g, l) in grad.row_mut(i).iter_mut().zip(&lp) {
            *g = l.exp() / m as f64;
        }
        grad[[i, t]] -= 1.0 / m as f64;
    }
    (total / m as f64, grad)
}

/// Mean cross-entropy over the non-ignored positions of a
/// `(batch, seq, classes)` logit tensor.
pub fn task_loss(logits: &Array3<f64>, targets: &Array2<i32>) -> Result<f64> {
    let (b, t, k) = logits.dim();
    if targets.dim() != (b, t) {
        return Err(Error::data(format!(
            "targets shaped {:?} do not match logits ({b}, {t}, {k})",
            targets.dim()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((i, j), &target) in targets.indexed_iter() {
        if target == IGNORE_INDEX {
            continue;
        }
        if target < 0 || target as usize >= k {
            return Err(Error::data(format!("target class {target} outside 0..{k}")));
        }
        let row: Vec<f64> = logits.slice(ndarray::s![i, j, ..]).to_vec();
        total -= log_softmax(&row)[target as usize];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_one_hot_logits_give_near_zero_loss() {
        let mut logits = Array3::zeros((1, 2, 4));
        logits[[0, 0, 1]] = 60.0;
        logits[[0, 1, 3]] = 60.0;
        let targets = Array2::from_shape_vec((1, 2), vec![1, 3]).unwrap();
        assert!(task_loss(&logits, &targets).unwrap() < 1e-20);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [3usize, 10, 512] {
            let logits = Array3::from_elem((2, 3, k), 0.7);
            let targets = Array2::from_shape_vec((2, 3), vec![0, IGNORE_INDEX, 1, 2, IGNORE_INDEX, 0]).unwrap();
            let loss = task_loss(&logits, &targets).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
        let logits = Array3::zeros((1, 1, 3));
        let loss = task_loss(&logits, &Array2::from_elem((1, 1), 2)).unwrap();
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn all_ignored_is_empty() {
        let logits = Array3::zeros((1, 3, 3));
        let targets = Array2::from_elem((1, 3), IGNORE_INDEX);
        assert!(matches!(task_loss(&logits, &targets), Err(Error::EmptyLoss)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
