//! Differentiable wrappers for the elementary kernels.

use crate::autograd::{Backward, Tape, Var};
use crate::error::Result;
use crate::ops::activation::softmax_backward;
use crate::ops::elementwise::reduce_to_shape;
use crate::ops::linear::linear_backward;
use crate::ops::norm::{batch_norm, batch_norm_backward, ChannelStats};
use crate::ops::pool::{pool2d_backward, pool2d_with_argmax};
use crate::ops::shape::{inverse_permutation, reduce_axis_backward, split};
use crate::ops::{self, BinaryOp, PoolMode};
use crate::tensor::{Scalar, Tensor};

struct Conv2dOp {
    stride: (usize, usize),
    padding: (usize, usize),
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let has_bias = inputs.len() == 3;
        let g = ops::conv2d_backward(
            inputs[0],
            inputs[1],
            grad,
            self.stride,
            self.padding,
            [needs[0], needs[1], has_bias && needs[2]],
        )?;
        let mut out = vec![g.input, g.weight];
        if has_bias {
            out.push(g.bias);
        }
        Ok(out)
    }
}

struct LinearOp;

impl<T: Scalar> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let has_bias = inputs.len() == 3;
        let g = linear_backward(inputs[0], inputs[1], grad, [needs[0], needs[1], has_bias && needs[2]]);
        let mut out = vec![g.input, g.weight];
        if has_bias {
            out.push(g.bias);
        }
        Ok(out)
    }
}

struct SoftmaxOp {
    axis: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(softmax_backward(output, grad, self.axis))])
    }
}

struct PoolOp {
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PoolOp {
    fn name(&self) -> &'static str {
        "pool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pool2d_backward(
            inputs[0].shape(),
            grad,
            self.mode,
            self.window,
            self.stride,
            &self.argmax,
        )?)])
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
}

struct UnaryOp(Unary);

impl<T: Scalar> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Scale(_) => "scale",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = match self.0 {
            Unary::Relu => inputs[0].zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })?,
            Unary::Sigmoid => output.zip_map(grad, |y, g| g * y * (T::one() - y))?,
            Unary::Tanh => output.zip_map(grad, |y, g| g * (T::one() - y * y))?,
            Unary::Scale(f) => grad.map(|g| g * T::of(f)),
        };
        Ok(vec![Some(g)])
    }
}

struct BinaryGrad(BinaryOp);

impl<T: Scalar> Backward<T> for BinaryGrad {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ga, gb) = match self.0 {
            BinaryOp::Add => (grad.clone(), grad.clone()),
            BinaryOp::Sub => (grad.clone(), grad.map(|g| -g)),
            BinaryOp::Mul => (
                if needs[0] { ops::mul(grad, b)? } else { grad.clone() },
                if needs[1] { ops::mul(grad, a)? } else { grad.clone() },
            ),
        };
        Ok(vec![
            needs[0].then(|| reduce_to_shape(&ga, a.shape())),
            needs[1].then(|| reduce_to_shape(&gb, b.shape())),
        ])
    }
}

struct ReduceOp {
    axis: usize,
    mean: bool,
}

impl<T: Scalar> Backward<T> for ReduceOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean_axis"
        } else {
            "sum_axis"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(reduce_axis_backward(
            grad,
            inputs[0].shape(),
            self.axis,
            self.mean,
        ))])
    }
}

struct SumAllOp;

impl<T: Scalar> Backward<T> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.data()[0]))])
    }
}

struct ReshapeOp;

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape().to_vec())?)])
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ops::permute(grad, &self.inverse)?)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let extents: Vec<usize> = inputs.iter().map(|t| t.dim(self.axis)).collect();
        Ok(split(grad, self.axis, &extents).into_iter().map(Some).collect())
    }
}

struct BatchNormOp<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dg, db) = batch_norm_backward(&self.xhat, &self.inv_std, inputs[1], grad, self.batch_stats);
        Ok(vec![Some(dx), Some(dg), Some(db)])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(y, inputs, Conv2dOp { stride, padding })
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(y, inputs, LinearOp)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        self.push(y, vec![x], SoftmaxOp { axis })
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (y, argmax) = pool2d_with_argmax(self.value(x), mode, window, stride)?;
        self.push(
            y,
            vec![x],
            PoolOp {
                mode,
                window,
                stride,
                argmax,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, vec![x], UnaryOp(Unary::Relu))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(x));
        self.push(y, vec![x], UnaryOp(Unary::Sigmoid))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = ops::tanh(self.value(x));
        self.push(y, vec![x], UnaryOp(Unary::Tanh))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = ops::scale(self.value(x), T::of(factor));
        self.push(y, vec![x], UnaryOp(Unary::Scale(factor)))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let y = ops::binary(op, self.value(a), self.value(b))?;
        self.push(y, vec![a, b], BinaryGrad(op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::reduce_axis(self.value(x), axis, false)?;
        self.push(y, vec![x], ReduceOp { axis, mean: false })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::reduce_axis(self.value(x), axis, true)?;
        self.push(y, vec![x], ReduceOp { axis, mean: true })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, vec![x], SumAllOp)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(y, vec![x], ReshapeOp)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), perm)?;
        self.push(
            y,
            vec![x],
            PermuteOp {
                inverse: inverse_permutation(perm),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&tensors, axis)?;
        self.push(y, parts.to_vec(), ConcatOp { axis })
    }

    /// Batch normalization over axis 1. With `running = None` the batch
    /// statistics are used and returned so the caller can update its running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&ChannelStats<T>>,
    ) -> Result<(Var, ChannelStats<T>)> {
        let out = batch_norm(self.value(x), self.value(gamma), self.value(beta), running)?;
        let v = self.push(
            out.y,
            vec![x, gamma, beta],
            BatchNormOp {
                xhat: out.xhat,
                inv_std: out.inv_std,
                batch_stats: running.is_none(),
            },
        )?;
        Ok((v, out.stats))
    }
}
