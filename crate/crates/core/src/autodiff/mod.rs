//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass; it
//! is rebuilt per pass so that weights synthesized inside the forward are
//! always derived from the current parameter values. [`Tape::backward`]
//! walks the record in reverse once and returns a [`Gradients`] holding the
//! adjoint of every node plus a [`GradMap`] keyed by [`ParamId`].

mod gradcheck;
mod ops;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, grad_check_param, grad_check_report, GradCheckReport};
pub use ops::{BnStats, Grouping, Mode, StatUpdate};

use crate::error::{ReplError, Result};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-parameter gradients. Every parameter bound on the tape with
/// `requires_grad` appears, with zeros when no path reached it.
pub type GradMap = BTreeMap<ParamId, Tensor>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: ops::Op,
    pub(crate) requires_grad: bool,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: ops::Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A free variable that receives gradient (used for inputs under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a registry entry to the tape. Repeated binds of the same id
    /// return the same leaf, so all uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: &ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(id) {
            return Ok(v);
        }
        let value = store.get(id)?.clone();
        let v = self.leaf(value, store.is_trainable(id));
        self.params.insert(id.clone(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, ops::Op::Leaf))
            .count()
    }

    /// Smallest `|input|` seen by any recorded ReLU, or `inf` if none.
    /// Finite-difference checks are only meaningful when a probe step
    /// cannot push any ReLU input across zero.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                ops::Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(ReplError::shape(
                "backward",
                "loss",
                format!("expected a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward_node(self, Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(id, v)| {
                let shape = self.shape(*v);
                let t = match &grads[v.0] {
                    Some(g) => Tensor::from_vec(shape, g.clone()),
                    None => Tensor::zeros(shape),
                };
                (id.clone(), t)
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }
}

pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: GradMap,
}

impl Gradients {
    /// Adjoint of any recorded value; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.by_node[v.0] {
            Some(g) => Tensor::from_vec(&self.shapes[v.0], g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }
}
