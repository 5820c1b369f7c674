use super::graph::{Grads, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

pub(crate) struct BatchNormSaved {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f32>,
    inv_std: Vec<f64>,
    train: bool,
    dims: (usize, usize, usize),
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (Bessel-corrected) variance, the quantity folded into running
    /// statistics.
    pub var: Vec<f64>,
}

impl Graph {
    /// `(N, C, spatial)` for `N×C` or `N×C×H×W` inputs.
    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), TensorError> {
        let shape = self.shape(x);
        if shape.len() != 2 && shape.len() != 4 {
            return Err(shape_err("batch_norm", format!("expected N×C or NCHW input, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        Ok((n, c, spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var, TensorError> {
        let (n, c, spatial) = dims;
        let needs = self.any_requires_grad(&[x, gamma, beta]);
        let xt = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; xt.numel()];
        let mut xhat = if needs { vec![0.0f32; xt.numel()] } else { Vec::new() };
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gam, bet) = (gd[ch] as f64, bd[ch] as f64);
                for i in base..base + spatial {
                    let h = (xt.data()[i] as f64 - m) * is;
                    out[i] = (gam * h + bet) as f32;
                    if needs {
                        xhat[i] = h as f32;
                    }
                }
            }
        }
        let value = Tensor::new(xt.shape(), out)?;
        let saved = BatchNormSaved { input: x, gamma, beta, xhat, inv_std, train, dims };
        Ok(self.push(value, Op::BatchNorm(saved), &[x, gamma, beta]))
    }

    /// Normalizes with the statistics of this batch and reports them so the
    /// caller can fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Config { op: "batch_norm", msg: format!("eps must be positive, got {eps}") });
        }
        let dims @ (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        let count = n * spatial;
        if count < 2 {
            return Err(TensorError::DegenerateBatch { op: "batch_norm", count });
        }
        let data = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |s| {
                let base = (s * c + ch) * spatial;
                data[base..base + spatial].iter().map(|&v| v as f64)
            });
            let m = vals().sum::<f64>() / count as f64;
            let ss: f64 = vals().map(|v| (v - m) * (v - m)).sum();
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, dims, &mean, inv_std, true)?;
        let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(shape_err("batch_norm", "running statistics do not match channel count"));
        }
        let mean: Vec<f64> = running_mean.iter().map(|&v| v as f64).collect();
        let inv_std = running_var.iter().map(|&v| 1.0 / (v as f64 + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, dims, &mean, inv_std, false)
    }

    /// Batch normalization over `N×C` or NCHW input. Train mode uses batch
    /// statistics and updates the running estimates by an exponential moving
    /// average with weight `momentum`; eval mode reads the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        train: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var, TensorError> {
        if !train {
            return self.batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
        }
        let (out, stats) = self.batch_norm_train(x, gamma, beta, eps)?;
        if running_mean.len() != stats.mean.len() || running_var.len() != stats.var.len() {
            return Err(shape_err("batch_norm", "running statistics do not match channel count"));
        }
        for (r, m) in running_mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * m) as f32;
        }
        for (r, v) in running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * v) as f32;
        }
        Ok(out)
    }
}

pub(super) fn batch_norm_backward(graph: &Graph, s: &BatchNormSaved, g: &[f32], grads: &mut Grads<'_>) {
    let (n, c, spatial) = s.dims;
    let count = (n * spatial) as f64;
    let gamma = graph.value(s.gamma).data();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for smp in 0..n {
        for ch in 0..c {
            let base = (smp * c + ch) * spatial;
            for i in base..base + spatial {
                sum_dy[ch] += g[i] as f64;
                sum_dy_xhat[ch] += g[i] as f64 * s.xhat[i] as f64;
            }
        }
    }
    if grads.wants(s.gamma) {
        for (d, v) in grads.slot(s.gamma).iter_mut().zip(&sum_dy_xhat) {
            *d += *v as f32;
        }
    }
    if grads.wants(s.beta) {
        for (d, v) in grads.slot(s.beta).iter_mut().zip(&sum_dy) {
            *d += *v as f32;
        }
    }
    if grads.wants(s.input) {
        let dx = grads.slot(s.input);
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * spatial;
                let k = gamma[ch] as f64 * s.inv_std[ch];
                for i in base..base + spatial {
                    let dy = g[i] as f64;
                    let v = if s.train {
                        k / count * (count * dy - sum_dy[ch] - s.xhat[i] as f64 * sum_dy_xhat[ch])
                    } else {
                        k * dy
                    };
                    dx[i] += v as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 11) as f32) * 0.3 - 1.0)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut g = Graph::new();
        let x = g.leaf(ramp(&[4, 3, 5, 5]));
        let gamma = g.leaf(Tensor::full(&[3], 1.0));
        let beta = g.leaf(Tensor::zeros(&[3]));
        let (y, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let d = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| (0..25).map(move |i| (s * 3 + ch) * 25 + i))
                .map(|i| d[i] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn eval_with_identity_stats_scales_by_eps_factor() {
        let mut g = Graph::new();
        let x = g.leaf(ramp(&[2, 2, 3, 3]));
        let gamma = g.leaf(Tensor::full(&[2], 1.0));
        let beta = g.leaf(Tensor::zeros(&[2]));
        let eps = 1e-5;
        let y = g.batch_norm_eval(x, gamma, beta, &[0.0; 2], &[1.0; 2], eps).unwrap();
        let factor = 1.0 / (1.0 + eps).sqrt();
        for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((*o as f64 - *i as f64 * factor).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let gamma = g.leaf(Tensor::full(&[1], 1.0));
        let beta = g.leaf(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0f32], vec![1.0f32]);
        g.batchnorm(x, gamma, beta, &mut rm, &mut rv, true, 1e-5, 0.1).unwrap();
        // batch mean 2, unbiased var 2
        assert!((rm[0] - 0.2).abs() < 1e-6);
        assert!((rv[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn single_value_batch_is_degenerate_in_train_mode() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]));
        let gamma = g.leaf(Tensor::full(&[4], 1.0));
        let beta = g.leaf(Tensor::zeros(&[4]));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta, 1e-5),
            Err(TensorError::DegenerateBatch { count: 1, .. })
        ));
        assert!(g.batch_norm_eval(x, gamma, beta, &[0.0; 4], &[1.0; 4], 1e-5).is_ok());
    }
}
