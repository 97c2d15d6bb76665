use super::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over rows and its gradient `(softmax − onehot) / rows`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&m(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad, m(&[&[-0.5, 0.5]]));
    }

    #[test]
    fn dominant_logit_is_stable() {
        let (loss, grad) = softmax_cross_entropy(&m(&[&[1000.0, 0.0]]), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn closed_form_value() {
        let (loss, _) = softmax_cross_entropy(&m(&[&[1.0, 2.0]]), &[1]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&m(&[&[1.0, 2.0]]), &[2]),
            Err(Error::Domain(_))
        ));
        assert!(softmax_cross_entropy(&m(&[&[1.0, 2.0]]), &[0, 1]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax(&m(&[&[1.0, -3.0, 700.0], &[0.0, 0.0, 0.0]]));
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
