use super::graph::{Grads, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

pub(crate) struct CrossEntropySaved {
    logits: Var,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

/// Row-wise softmax in `f64`, stabilized by max subtraction.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / z));
    }
    probs
}

impl Graph {
    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let [n, k] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::LabelOutOfRange { row, label, classes: k });
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &label) in data.chunks(k).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[label] as f64;
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        let probs = if self.any_requires_grad(&[logits]) { softmax_rows(data, k) } else { Vec::new() };
        let saved = CrossEntropySaved { logits, probs, labels: labels.to_vec() };
        Ok(self.push(loss, Op::CrossEntropy(saved), &[logits]))
    }
}

pub(super) fn cross_entropy_backward(s: &CrossEntropySaved, g: &[f32], grads: &mut Grads<'_>) {
    if !grads.wants(s.logits) {
        return;
    }
    let n = s.labels.len();
    let k = s.probs.len() / n;
    let scale = g[0] as f64 / n as f64;
    let dx = grads.slot(s.logits);
    for (i, &label) in s.labels.iter().enumerate() {
        for j in 0..k {
            let target = if j == label { 1.0 } else { 0.0 };
            dx[i * k + j] += ((s.probs[i * k + j] - target) * scale) as f32;
        }
    }
}
