use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{conv, dense, loss, norm, pointwise, pool, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, with whatever forward state its backward
/// rule needs.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Dropout(Var, Vec<f32>),
    Linear(dense::LinearSaved),
    Conv(conv::ConvSaved),
    BatchNorm(norm::BatchNormSaved),
    MaxPool(pool::MaxPoolSaved),
    GlobalAvgPool(Var),
    ConcatPool(pool::ConcatPoolSaved),
    CrossEntropy(loss::CrossEntropySaved),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Gradient buffers for one backward pass, allocated lazily.
pub(crate) struct Grads<'g> {
    nodes: &'g [Node],
    bufs: Vec<Option<Vec<f32>>>,
}

impl Grads<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulation buffer for `v`; callers must check [`Grads::wants`] first.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [f32] {
        let len = self.nodes[v.0].value.numel();
        self.bufs[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f32]) {
        if self.wants(v) {
            for (s, x) in self.slot(v).iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is topologically sorted
/// by construction and backward is a single reverse sweep.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) rng: ChaCha8Rng,
    grad_enabled: bool,
    bindings: Vec<(usize, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Graph whose stochastic ops (dropout) draw from a stream seeded by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            grad_enabled: true,
            bindings: Vec::new(),
        }
    }

    /// Graph that records values only; no backward state is kept.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward allocates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a model parameter leaf, remembering which parameter slot it came
    /// from so gradients can be routed back after backward.
    pub fn param(&mut self, slot: usize, tensor: Tensor) -> Var {
        let v = self.leaf(tensor);
        self.bindings.push((slot, v));
        v
    }

    pub fn bindings(&self) -> &[(usize, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Every leaf with `requires_grad`
    /// receives `dloss/dleaf` (zeros when it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads = Grads {
            nodes: &self.nodes,
            bufs: vec![None; self.nodes.len()],
        };
        if grads.wants(loss) {
            grads.slot(loss)[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads.bufs[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads.bufs[i] = Some(g);
                }
                op => backward_op(self, op, &node.value, &g, &mut grads),
            }
        }
        let mut bufs = grads.bufs;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = bufs[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

fn backward_op(graph: &Graph, op: &Op, out: &Tensor, g: &[f32], grads: &mut Grads<'_>) {
    match op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            grads.add(*a, g);
            grads.add(*b, g);
        }
        Op::Sub(a, b) => {
            grads.add(*a, g);
            if grads.wants(*b) {
                for (s, x) in grads.slot(*b).iter_mut().zip(g) {
                    *s -= x;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (graph.value(*a).data(), graph.value(*b).data());
            if grads.wants(*a) {
                for ((s, x), y) in grads.slot(*a).iter_mut().zip(g).zip(vb) {
                    *s += x * y;
                }
            }
            if grads.wants(*b) {
                for ((s, x), y) in grads.slot(*b).iter_mut().zip(g).zip(va) {
                    *s += x * y;
                }
            }
        }
        Op::Scale(x, k) => {
            if grads.wants(*x) {
                for (s, d) in grads.slot(*x).iter_mut().zip(g) {
                    *s += d * k;
                }
            }
        }
        Op::Sum(x) => {
            if grads.wants(*x) {
                for s in grads.slot(*x).iter_mut() {
                    *s += g[0];
                }
            }
        }
        Op::Reshape(x) => grads.add(*x, g),
        Op::Relu(x) => pointwise::relu_backward(*x, out, g, grads),
        Op::Dropout(x, mask) => {
            if grads.wants(*x) {
                for ((s, d), m) in grads.slot(*x).iter_mut().zip(g).zip(mask) {
                    *s += d * m;
                }
            }
        }
        Op::Linear(saved) => dense::linear_backward(graph, saved, g, grads),
        Op::Conv(saved) => conv::conv2d_backward(graph, saved, g, grads),
        Op::BatchNorm(saved) => norm::batch_norm_backward(graph, saved, g, grads),
        Op::MaxPool(saved) => pool::max_pool_backward(saved, g, grads),
        Op::GlobalAvgPool(x) => pool::global_avg_pool_backward(graph, *x, g, grads),
        Op::ConcatPool(saved) => pool::concat_pool_backward(graph, saved, g, grads),
        Op::CrossEntropy(saved) => loss::cross_entropy_backward(saved, g, grads),
    }
}
