//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to the [`Tensor`] handles that
//! live on it. Handles are `Copy` indices into the tape, so model code reads
//! like ordinary arithmetic:
//!
//! ```
//! use groundseg::diff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]);
//! let loss = x.mul(x).sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```
//!
//! Tensors created with [`Tape::constant`] are not tracked; anything computed
//! only from constants is a constant too and receives no gradient.

mod gradcheck;
mod kernels;
mod ops;
mod serialize;
#[cfg(test)]
mod tests;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, relative_error};
pub use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub use serialize::{read_tensor_record, write_tensor_record, TensorRecord, TENSOR_MAGIC};

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

pub(crate) use ops::Op;
pub use ops::{AttentionParts, ConvGeom, NORM_EPS};
pub(crate) use ops::softmax_in_place as softmax_slice;

/// Position of a tensor on its tape.
pub type NodeId = usize;

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) tracked: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Ordered record of operations. Node ids are assigned in creation order, so
/// every input id precedes its consumer and a reverse sweep is topological.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input: gradients are accumulated into it by [`Tape::backward`].
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Tensor<'_> {
        check_extents(&values, shape);
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Tensor<'_> {
        check_extents(&values, shape);
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        let n = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.constant(vec![value], &[1])
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Tensor<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            tracked,
            grad: None,
        });
        Tensor { tape: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively when a
    /// tensor feeds several consumers. Previously stored gradients are replaced.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss tensor belongs to a different tape".into()));
        }
        let numel = loss.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].tracked {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            ops::backward_node(&nodes, id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        for (node, grad) in nodes.iter_mut().zip(grads) {
            node.grad = if node.tracked { grad } else { None };
        }
        Ok(())
    }

    /// Drops all stored gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

fn check_extents(values: &[f64], shape: &[usize]) {
    let n: usize = shape.iter().product();
    assert!(
        n == values.len(),
        "shape {:?} needs {} values, got {}",
        shape,
        n,
        values.len()
    );
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Borrow of the flat row-major values. Do not hold across new ops.
    pub fn values(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    /// Gradient stored by the last backward pass, if this tensor was reached.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Untracked copy of this tensor's value on the same tape.
    pub fn detach(&self) -> Tensor<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, Op::Leaf, false)
    }

    /// Row count when the tensor is viewed as `[rows x last_dim]`.
    pub fn rows(&self) -> usize {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let cols = *node.shape.last().unwrap_or(&1);
        node.value.len() / cols.max(1)
    }

    pub fn last_dim(&self) -> usize {
        *self.tape.nodes.borrow()[self.id].shape.last().unwrap_or(&1)
    }
}
