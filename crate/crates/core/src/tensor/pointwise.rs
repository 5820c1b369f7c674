use rand::Rng;

use super::graph::{Grads, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    /// Elementwise sum of two equally shaped tensors (residual connections).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * k).collect()).unwrap();
        self.push(out, Op::Scale(x, k), &[x])
    }

    /// Sum of all elements as a one-element tensor, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        self.push(out, Op::Relu(x), &[x])
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f32, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config {
                op: "dropout",
                msg: format!("drop probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        let needs = self.any_requires_grad(&[x]);
        Ok(self.push(out, Op::Dropout(x, if needs { mask } else { Vec::new() }), &[x]))
    }
}

pub(super) fn relu_backward(x: Var, out: &Tensor, g: &[f32], grads: &mut Grads<'_>) {
    if grads.wants(x) {
        for ((s, d), y) in grads.slot(x).iter_mut().zip(g).zip(out.data()) {
            if *y > 0.0 {
                *s += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4, 5], |i| i as f32));
        let y = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_preserves_expected_value() {
        let mut g = Graph::with_seed(7);
        let x = g.leaf(Tensor::full(&[10_000], 2.0));
        let y = g.dropout(x, 0.25, true).unwrap();
        let mean = g.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
        assert!(g.value(y).data().contains(&0.0));
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.dropout(x, 1.0, true).is_err());
    }

    #[test]
    fn relu_passes_positive_part() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[4], vec![-1.0, 0.5, 0.0, 2.0]).unwrap().with_requires_grad(true));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn flatten_collapses_trailing_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4, 5]));
        let y = g.flatten(x).unwrap();
        assert_eq!(g.shape(y), &[2, 60]);
    }
}
