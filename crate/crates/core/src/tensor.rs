//! Dense row-major `f64` tensors with a recorded graph for reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional gradient slot. Every
//! differentiable operation in [`crate::ops`] records its inputs and a
//! vector-Jacobian closure whenever one of the inputs requires a gradient;
//! [`Tensor::backward`] walks that graph in reverse topological order.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// Called with the gradient flowing into the operation's output and a mask of
/// which inputs need a gradient. Returns one entry per input, `None` where no
/// gradient was requested.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Lineage {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    lineage: Option<Lineage>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        if let Some(l) = &self.0.lineage {
            s.field("op", &l.op);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, lineage: Option<Lineage>) -> Self {
        Tensor(Arc::new(Inner {
            data,
            shape,
            requires_grad,
            grad: Mutex::new(None),
            lineage,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, false)
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, true)
    }

    fn checked(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must be non-empty and positive")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::build(data, shape.to_vec(), requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(vec![value; numel_of(shape)], shape).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    /// Result of a recorded operation. Lineage is kept only when some input
    /// requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op} produced inconsistent shape");
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let lineage = requires_grad.then(|| Lineage {
            op,
            inputs,
            backward,
        });
        Self::build(data, shape, requires_grad, lineage)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.lineage.is_none()
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.lineage.as_ref().map(|l| l.op)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut off from the graph and from gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Fresh trainable leaf with these values.
    pub fn to_parameter(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf that requires one; call [`Tensor::zero_grad`] (or
    /// [`crate::params::ParameterSet::zero_grad`]) to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that does not depend on any parameter".into(),
            ));
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.lineage {
                None => node.accumulate_grad(&g),
                Some(lineage) => {
                    let needs: Vec<bool> = lineage.inputs.iter().map(Tensor::requires_grad).collect();
                    let input_grads = (lineage.backward)(&g, &needs);
                    debug_assert_eq!(input_grads.len(), lineage.inputs.len());
                    for ((input, ig), need) in lineage.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(ig) = ig else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{} grad size", lineage.op);
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require grad; iterative to survive deep graphs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, child)) = stack.pop() {
            let inputs = node.0.lineage.as_ref().map(|l| l.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.key()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
