pub(crate) mod activation;
pub(crate) mod basic;
pub(crate) mod conv;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod pool;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

use super::tape::{InputGrads, Op, Tape};

/// Dispatches one node's backward rule. Returns one entry per input; `None`
/// where the input does not need a gradient.
pub(crate) fn backward<S: Real>(
    tape: &Tape<S>,
    op: &Op<S>,
    inputs: &[&Tensor<S>],
    out: &Tensor<S>,
    gout: &[S],
    need: &[bool],
) -> Result<InputGrads<S>> {
    let grads = match op {
        Op::Leaf => Vec::new(),
        Op::MatMul
        | Op::Add
        | Op::Sub
        | Op::Mul
        | Op::AddRowBias
        | Op::Scale(_)
        | Op::MulConst(_)
        | Op::Sum
        | Op::Mean
        | Op::Reshape
        | Op::SliceCols { .. }
        | Op::ConcatCols
        | Op::InterleaveRows => basic::backward(op, inputs, out, gout, need),
        Op::Relu | Op::Sigmoid | Op::Tanh | Op::Softmax => activation::backward(op, inputs, out, gout),
        Op::Conv2d(g) => conv::backward(g, inputs, gout, need),
        Op::MaxPool(_) | Op::AvgPool(_) | Op::AdaptiveAvgPool(_) => pool::backward(op, inputs, gout),
        Op::BatchNorm(saved) => norm::backward(saved, inputs, gout, need),
        Op::CrossEntropy(_) | Op::ColumnMean => loss::backward(op, inputs, gout),
        Op::AffineGrid(g) => crate::spatial::affine_grid_backward(g, gout),
        Op::BilinearSample { regions_per_image } => {
            crate::spatial::bilinear_backward(*regions_per_image, inputs, gout, need, tape.fault())
        }
        Op::Ctc(saved) => crate::ctc::ctc_backward(saved, gout),
    };
    Ok(grads)
}
