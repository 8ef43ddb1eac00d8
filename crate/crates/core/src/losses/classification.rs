use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Mean negative log-softmax of the true class over `logits` (N×m).
///
/// Callers restrict `logits` to the classes being learned, e.g. the new-class
/// columns of an extended head, and pass labels local to that slice.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, m] = *logits.shape() else {
        return Err(Error::Contract(format!(
            "cross_entropy expects N×m logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    let mut one_hot = vec![0.0; n * m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::Contract(format!(
                "cross_entropy: label {y} of sample {i} is out of range for {m} classes"
            )));
        }
        one_hot[i * m + y] = 1.0;
    }
    let picked = logits
        .log_softmax_rows(1.0)?
        .mul(&Tensor::new(&[n, m], one_hot)?)?
        .sum();
    Ok(picked.scale(-1.0 / n as f64))
}
