use super::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub(crate) fn mse_backward(pred: &Tensor, target: &Tensor, g: &Tensor) -> Tensor {
    let s = 2.0 * g.data()[0] / pred.len() as f64;
    Tensor::from_fn(pred.shape().to_vec(), |i| s * (pred.data()[i] - target.data()[i]))
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, labels: &[usize], g: &Tensor) -> Tensor {
    let k = probs.shape()[1];
    let s = g.data()[0] / labels.len() as f64;
    let mut out = probs.data().to_vec();
    for (r, &l) in labels.iter().enumerate() {
        out[r * k + l] -= 1.0;
    }
    out.iter_mut().for_each(|v| *v *= s);
    Tensor::new(probs.shape().to_vec(), out).expect("ce shape")
}

/// Row-wise softmax of `[rows, k]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax shape")
}

impl Tape {
    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return shape_err(format!("mse {:?} vs target {:?}", p.shape(), target.shape()));
        }
        let v = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(v), Op::Mse { pred, target: target.clone() }, "mse")
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits[rows, k]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.shape()[0] != labels.len() {
            return shape_err(format!("cross_entropy logits {:?} for {} labels", l.shape(), labels.len()));
        }
        let k = l.shape()[1];
        if let Some(bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(l);
        let nll = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                let row = &l.data()[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[c]
            })
            .sum::<f64>()
            / labels.len() as f64;
        self.push(Tensor::scalar(nll), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, "cross_entropy")
    }
}
