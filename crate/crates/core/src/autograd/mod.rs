//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every recorded value is a node; nodes are appended in evaluation order, so
//! the tape is a DAG already in topological order. [`Tape::backward`] walks it
//! once from the output towards the leaves, asking each op for the adjoints of
//! its inputs and accumulating them.

mod ops;
mod param;

pub use param::{ParamStore, Parameter};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The adjoint of one recorded op.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input. Entries whose `needs` flag is false may be
    /// `None`; the tape ignores them either way.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Origin {
    Constant,
    Input,
    Param(String),
    Op,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    origin: Origin,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which inputs and parameters are recorded as constants, so no
    /// adjoint state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    fn push_leaf(&mut self, value: Tensor<T>, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Origin::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let g = self.grad_enabled;
        self.push_leaf(value, Origin::Input, g)
    }

    /// A named parameter leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let g = self.grad_enabled;
        self.push_leaf(value, Origin::Param(name.into()), g)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Records the result of an op. Non-finite outputs are rejected here so
    /// that blow-ups surface at the op that produced them.
    pub fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: impl Backward<T> + 'static) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node {
            value,
            inputs,
            op,
            origin: Origin::Op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. `output`) back
    /// through the tape.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::shape(
                "backward",
                format!("seed shape {:?} != output shape {:?}", seed.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&v, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::shape(
                        op.name(),
                        format!(
                            "adjoint shape {:?} != input shape {:?}",
                            g.shape(),
                            self.nodes[v.0].value.shape()
                        ),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the adjoint of leaves and retain intermediates for inspection.
            grads[id] = Some(grad);
        }
        let mut params = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let (Origin::Param(name), Some(g)) = (&node.origin, &grads[id]) {
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                    Some(acc) => {
                        let acc: &mut Tensor<T> = acc;
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_var: grads, params })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward", format!("output {shape:?} is not a scalar")));
        }
        self.backward(output, Tensor::ones(shape))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. any node, `None` if it did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
