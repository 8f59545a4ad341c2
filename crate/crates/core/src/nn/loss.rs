use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(dim_err!("{} labels for a batch of {b}", labels.len()));
    }
    let mut grad = vec![T::zero(); b * c];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
        if label >= c {
            return Err(Error::Domain(format!("label {label} outside [0, {c})")));
        }
        let max = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| m.max(v))
            .as_f64();
        let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[i * c + j] = T::of((e / z - onehot) / b as f64);
        }
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy is {loss}")));
    }
    Ok((loss, Tensor::new(&[b, c], grad)?))
}

/// Index of the largest logit in every row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, row[0]),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0
        })
        .collect())
}
