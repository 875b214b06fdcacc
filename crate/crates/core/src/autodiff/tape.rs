//! Operation tape for reverse-mode differentiation.
//!
//! Every differentiable primitive appends one node holding its output value,
//! the ids of its inputs and whatever it saved for the backward rule. Nodes
//! are only ever appended, so inputs always precede their consumers and a
//! single reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::ops;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Faults that can be planted in backward rules to prove the gradient
/// checker notices them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the sampler's gradient with respect to grid coordinates.
    SamplerSignFlip,
}

pub(crate) type InputGrads<S> = Vec<Option<Vec<S>>>;

/// Recorded operation together with the state its backward rule needs.
pub(crate) enum Op<S: Real> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale(S),
    MulConst(Vec<S>),
    Sum,
    Mean,
    Reshape,
    SliceCols { start: usize },
    ConcatCols,
    InterleaveRows,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Conv2d(ops::conv::ConvGeometry),
    MaxPool(ops::pool::MaxPoolSaved<S>),
    AvgPool(ops::pool::PoolGeometry),
    AdaptiveAvgPool(ops::pool::AdaptiveGeometry),
    BatchNorm(ops::norm::BatchNormSaved<S>),
    AffineGrid(crate::spatial::GridGeometry),
    BilinearSample { regions_per_image: usize },
    ColumnMean,
    CrossEntropy(ops::loss::CrossEntropySaved<S>),
    Ctc(crate::ctc::CtcSaved<S>),
}

impl<S: Real> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRowBias => "add_row_bias",
            Op::Scale(_) => "scale",
            Op::MulConst(_) => "mul_const",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::InterleaveRows => "interleave_rows",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool(_) => "max_pool",
            Op::AvgPool(_) => "avg_pool",
            Op::AdaptiveAvgPool(_) => "tiled_avg_pool",
            Op::BatchNorm(_) => "batch_norm",
            Op::AffineGrid(_) => "affine_grid",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::ColumnMean => "column_mean",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::Ctc(_) => "ctc_loss",
        }
    }
}

struct Node<S: Real> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
    fault: Option<Fault>,
}

impl<S: Real> std::fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape()))).finish()
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub(crate) fn fault(&self) -> Option<Fault> {
        self.fault
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, inputs: Vec<Var>, op: Op<S>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor<S>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contributions = ops::backward(self, &node.op, &inputs, &node.value, &gout, &need)?;
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                debug_assert_eq!(contribution.len(), self.nodes[input.0].value.len());
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
        }

        // only leaves keep their gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].inputs.is_empty() || !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Smallest distance of any recorded non-smooth op from its kink (ReLU
    /// inputs from 0, max-pool winners from runners-up, sampling coordinates
    /// from integers). Finite-difference checks with a step larger than this
    /// are not meaningful.
    pub fn nonsmooth_margin(&self) -> Option<S> {
        let mut margin: Option<S> = None;
        let mut update = |m: S| margin = Some(margin.map_or(m, |cur: S| cur.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    if let Some(m) = x.data().iter().map(|v| v.abs()).reduce(S::min) {
                        update(m);
                    }
                }
                Op::MaxPool(saved) => update(saved.min_gap),
                Op::BilinearSample { .. } => {
                    let grid = &self.nodes[node.inputs[1].0].value;
                    if let Some(m) = grid.data().iter().map(|v| (*v - v.round()).abs()).reduce(S::min) {
                        update(m);
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

impl<S: Real> Tape<S> {
    /// Discrete state of every non-smooth op: ReLU input signs, max-pool
    /// winners and integer parts of sampling coordinates. Finite differences
    /// are only meaningful between inputs with equal patterns.
    pub fn kink_pattern(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    out.extend(x.data().iter().map(|v| i64::from(*v > S::zero())));
                }
                Op::MaxPool(saved) => out.extend(saved.argmax.iter().map(|&i| i as i64)),
                Op::BilinearSample { .. } => {
                    let grid = &self.nodes[node.inputs[1].0].value;
                    out.extend(grid.data().iter().map(|v| v.floor().to_f64_lossy() as i64));
                }
                _ => {}
            }
        }
        out
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of a variable leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for disconnected leaves.
    pub fn get_or_zeros(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
