use std::collections::HashSet;
use std::fmt;

use super::{split_last, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which model component recorded a node. Used by instrumentation to check
/// what a gradient graph passes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeTag {
    Encoder,
    Decoder,
    Denoiser,
    Operator,
    Degradation,
}

/// An opaque differentiable map with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns `Jᵀ·upstream`, shaped like the op's input.
    fn vjp(&self, upstream: &Tensor) -> Tensor;
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    L1(Var),
    L2Norm(Var),
    Clamp(Var, f64, f64),
    AddBias(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
    Custom(Var, Box<dyn CustomOp>),
}

impl Op {
    fn inputs(&self) -> (Option<Var>, Option<Var>) {
        use Op::*;
        match *self {
            Leaf | Constant => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddBias(a, b) | Concat(a, b) => {
                (Some(a), Some(b))
            }
            Scale(a, _) | Sum(a) | Mean(a) | Relu(a) | Tanh(a) | L1(a) | L2Norm(a)
            | Clamp(a, _, _) | Reshape(a) | Custom(a, _) => (Some(a), None),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    tag: Option<NodeTag>,
}

/// Wengert list of traced operations. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<NodeTag>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Runs `f` with every node it records tagged `tag`.
    pub fn scoped<T>(&mut self, tag: NodeTag, f: impl FnOnce(&mut Tape) -> T) -> T {
        self.scopes.push(tag);
        let out = f(self);
        self.scopes.pop();
        out
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tag: self.scopes.last().copied(),
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let (a, b) = op.inputs();
        let rg = a.is_some_and(|v| self.nodes[v.0].requires_grad)
            || b.is_some_and(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::add(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::sub(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = super::scale(self.value(a), c);
        self.record(v, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = super::sum(self.value(a));
        self.record(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = super::mean(self.value(a));
        self.record(v, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = super::relu(self.value(a));
        self.record(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = super::tanh(self.value(a));
        self.record(v, Op::Tanh(a))
    }

    pub fn l1(&mut self, a: Var) -> Var {
        let v = super::l1(self.value(a));
        self.record(v, Op::L1(a))
    }

    pub fn l2norm(&mut self, a: Var) -> Var {
        let v = super::l2norm(self.value(a));
        self.record(v, Op::L2Norm(a))
    }

    /// `‖a‖₂²`, recorded as `sum(a ∘ a)`.
    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = super::clamp(self.value(a), lo, hi);
        self.record(v, Op::Clamp(a, lo, hi))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = super::add_bias(self.value(a), self.value(bias))?;
        Ok(self.record(v, Op::AddBias(a, bias)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::concat(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Concat(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a)))
    }

    /// Records an opaque op whose forward value was computed by the caller.
    pub fn custom(&mut self, input: Var, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.record(value, Op::Custom(input, op))
    }

    /// Number of nodes carrying `tag` that `root` depends on.
    pub fn tagged_ancestors(&self, root: Var, tag: NodeTag) -> usize {
        let mut seen = HashSet::new();
        let mut stack = vec![root];
        let mut count = 0;
        while let Some(v) = stack.pop() {
            if !seen.insert(v) {
                continue;
            }
            let node = &self.nodes[v.0];
            if node.tag == Some(tag) {
                count += 1;
            }
            let (a, b) = node.op.inputs();
            stack.extend(a);
            stack.extend(b);
        }
        count
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            let slot = &mut grads[v.0];
            *slot = Some(match slot.take() {
                Some(acc) => super::add(&acc, &contrib)?,
                None => contrib,
            });
            Ok(())
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, super::scale(g, -1.0))?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, super::mul(g, val(*b))?)?;
                }
                if needs(*b) {
                    send(*b, super::mul(g, val(*a))?)?;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if bv.rank() == 1 {
                    // y = A v:  dA = g ⊗ v,  dv = Aᵀ g
                    if needs(*a) {
                        let (m, n) = (av.rows(), av.cols());
                        let mut outer = vec![0.0; m * n];
                        for (i, gi) in g.data().iter().enumerate() {
                            for (j, vj) in bv.data().iter().enumerate() {
                                outer[i * n + j] = gi * vj;
                            }
                        }
                        send(*a, Tensor::matrix(m, n, outer)?)?;
                    }
                    if needs(*b) {
                        let gm = g.reshape(&[1, g.len()])?;
                        let dv = super::matmul(&gm, av)?;
                        send(*b, dv.reshape(&[bv.len()])?)?;
                    }
                } else {
                    if needs(*a) {
                        send(*a, super::matmul_nt(g, bv)?)?;
                    }
                    if needs(*b) {
                        send(*b, super::matmul_tn(av, g)?)?;
                    }
                }
            }
            Op::Scale(a, c) => send(*a, super::scale(g, *c))?,
            Op::Sum(a) => {
                let gv = g.item();
                send(*a, Tensor::from_fn(val(*a).shape(), |_| gv))?;
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.item() / x.len() as f64;
                send(*a, Tensor::from_fn(x.shape(), |_| gv))?;
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { g.data()[i] } else { 0.0 });
                send(*a, d)?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = Tensor::from_fn(y.shape(), |i| g.data()[i] * (1.0 - y.data()[i].powi(2)));
                send(*a, d)?;
            }
            Op::L1(a) => {
                let gv = g.item();
                let x = val(*a);
                let d = Tensor::from_fn(x.shape(), |i| {
                    let v = x.data()[i];
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                send(*a, d)?;
            }
            Op::L2Norm(a) => {
                // At the origin the norm is not differentiable; its gradient is taken as 0.
                let norm = node.value.item();
                let x = val(*a);
                let d = if norm > 0.0 {
                    super::scale(x, g.item() / norm)
                } else {
                    Tensor::zeros(x.shape())
                };
                send(*a, d)?;
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let d = Tensor::from_fn(x.shape(), |i| {
                    let v = x.data()[i];
                    if v > *lo && v < *hi {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                send(*a, d)?;
            }
            Op::AddBias(a, b) => {
                send(*a, g.clone())?;
                if needs(*b) {
                    let n = val(*b).len();
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (s, r) in acc.iter_mut().zip(row) {
                            *s += r;
                        }
                    }
                    send(*b, Tensor::vector(acc))?;
                }
            }
            Op::Concat(a, b) => {
                let at = *val(*a).shape().last().unwrap_or(&0);
                let (ga, gb) = split_last(g, at);
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::Custom(a, op) => send(*a, op.vjp(g))?,
        }
        Ok(())
    }
}

/// Per-node gradients of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when `v` does not influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
