use super::gemm::{gemm, Layout};
use super::graph::{Grads, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

pub(crate) struct LinearSaved {
    input: Var,
    weight: Var,
    bias: Option<Var>,
}

impl Graph {
    /// `y = x · Wᵀ + b` with `x: N × in`, `W: out × in`, `b: out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let [n, inp] = self.value(x).dims2("linear")?;
        let [out, w_in] = self.value(weight).dims2("linear")?;
        if w_in != inp {
            return Err(shape_err(
                "linear",
                format!("input has {inp} features but weight expects {w_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(shape_err(
                    "linear",
                    format!("bias shape {:?} does not match {out} outputs", self.shape(b)),
                ));
            }
        }
        let mut y = vec![0.0f32; n * out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            n,
            inp,
            out,
            self.value(x).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Transposed,
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut y,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let saved = LinearSaved { input: x, weight, bias };
        Ok(self.push(Tensor::new(&[n, out], y)?, Op::Linear(saved), &inputs))
    }
}

pub(super) fn linear_backward(graph: &Graph, s: &LinearSaved, g: &[f32], grads: &mut Grads<'_>) {
    let xt = graph.value(s.input);
    let wt = graph.value(s.weight);
    let (n, inp) = (xt.shape()[0], xt.shape()[1]);
    let out = wt.shape()[0];
    if grads.wants(s.input) {
        gemm(n, out, inp, g, Layout::Normal, wt.data(), Layout::Normal, 1.0, grads.slot(s.input));
    }
    if grads.wants(s.weight) {
        gemm(out, n, inp, g, Layout::Transposed, xt.data(), Layout::Normal, 1.0, grads.slot(s.weight));
    }
    if let Some(b) = s.bias {
        if grads.wants(b) {
            let slot = grads.slot(b);
            for j in 0..out {
                let acc: f64 = (0..n).map(|i| g[i * out + j] as f64).sum();
                slot[j] += acc as f32;
            }
        }
    }
}
