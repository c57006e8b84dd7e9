use std::collections::HashMap;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Records one forward pass. Values are immutable once pushed; `backward`
/// walks the nodes in reverse insertion order, which is a valid reverse
/// topological order because inputs always precede their consumers.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { shape, data, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; it receives a gradient when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            op: Op::Leaf { requires_grad: t.requires_grad },
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data, .. } = t;
        self.nodes.push(Node { shape, data, op: Op::Leaf { requires_grad: false }, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a model parameter. Repeated calls within one tape return the
    /// same variable so gradients from every use accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.leaf(params.get(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.data.clone())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", node.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf { .. }) {
                self.backward_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates into every parameter gradient buffer.
    /// Parameters that requires_grad but did not take part receive zeros.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        let per_param = self.param_grads(&grads, params);
        params.accumulate(&per_param)
    }

    /// Gradients aligned with `params` order; zeros for unused parameters.
    pub fn param_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Vec<f64>> {
        params
            .ids()
            .map(|id| match self.params.get(&id).and_then(|v| grads.get(*v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params.get(id).numel()],
            })
            .collect()
    }

    pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
