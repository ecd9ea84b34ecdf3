//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one node per value that depends on a gradient-requiring
//! leaf. Nodes are appended in evaluation order, so node ids are a
//! topological order and [`Tape::backward`] simply walks them in reverse,
//! accumulating gradients additively across fan-out.
//!
//! An inference tape (see [`Tape::inference`]) records nothing: every op only
//! computes its value and intermediate tensors are freed as soon as the
//! caller drops them.

mod check;
mod ops;

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub use check::{finite_difference_check, GradCheck, GradCheckOptions};
pub use ops::Unary;

pub type NodeId = usize;

type Backward = Box<dyn Fn(&Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    parents: Vec<Option<NodeId>>,
    backward: Option<Backward>,
    leaf_shape: Option<Vec<usize>>,
}

/// A value flowing through a computation, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

/// Recording context for one forward/backward evaluation.
///
/// Not thread-safe; use one tape per evaluation context.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(NodeId, ParamId)>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A forward-only context: ops compute values and nothing is recorded.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    /// A gradient-requiring leaf (a plain constant on an inference tape).
    pub fn leaf(&self, t: Tensor) -> Var {
        if !self.recording {
            return self.constant(t);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            leaf_shape: Some(t.shape().to_vec()),
        });
        Var {
            value: Rc::new(t),
            node: Some(id),
        }
    }

    /// A leaf bound to a model parameter, so its gradient can be looked up by id.
    pub fn param(&self, id: ParamId, t: &Tensor) -> Var {
        let v = self.leaf(t.clone());
        if let Some(n) = v.node {
            self.params.borrow_mut().push((n, id));
        }
        v
    }

    /// Records an op output. `backward` maps the output gradient to one
    /// optional gradient per input, in input order.
    pub(crate) fn record(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        self.record_rc(Rc::new(value), inputs, backward)
    }

    /// Whether an op over `inputs` will be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Var]) -> bool {
        self.recording && inputs.iter().any(|v| v.node.is_some())
    }

    pub(crate) fn record_rc(
        &self,
        value: Rc<Tensor>,
        inputs: &[&Var],
        backward: impl Fn(&Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        if !self.tracks(inputs) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
            leaf_shape: None,
        });
        Var {
            value,
            node: Some(id),
        }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every gradient-requiring leaf receives `d loss / d leaf`; leaves that
    /// the loss does not depend on receive zeros.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(root) = loss.node {
            grads[root] = Some(Tensor::ones(loss.shape().to_vec()));
            for i in (0..=root).rev() {
                let node = &nodes[i];
                let Some(backward) = &node.backward else {
                    continue;
                };
                let Some(g) = grads[i].take() else {
                    continue;
                };
                let parent_grads = backward(&g)?;
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(p), Some(pg)) = (parent, pg) {
                        match &mut grads[*p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Some(shape) = &node.leaf_shape {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(shape.clone()));
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf variable; `None` for constants and non-leaves.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.node?)?.as_ref()
    }

    /// Gradient of a parameter bound through [`Tape::param`]; when a parameter
    /// was bound more than once, the gradients of all bindings are summed.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for &(node, pid) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Gradients for parameters `0..count`, zero-filled where a parameter was
    /// not bound on this tape.
    pub fn param_list(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.param(ParamId(i))
                    .unwrap_or_else(|| Tensor::zeros(s.to_vec()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
