//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each node stores its forward
//! value and, when any input requires a gradient, the [`Op`] that knows how to
//! push an output gradient back to its inputs. Nodes are appended in
//! topological order, so the backward sweep is a single reverse pass.
//!
//! Parameters are borrowed from a [`ParamStore`] and copied in on first use.
//! A graph built with [`Graph::inference`] records no backward state at all.

use std::collections::HashMap;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
pub trait Op {
    fn name(&self) -> &'static str;

    /// Accumulates the input gradients implied by `out_grad` into `grads`.
    fn backward(&self, values: &Values<'_>, out: Var, out_grad: &[f64], grads: &mut Grads<'_>);
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
}

/// Read access to forward values during the backward sweep.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl Values<'_> {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }
}

/// Write access to gradient buffers during the backward sweep.
pub struct Grads<'a> {
    nodes: &'a [Node],
    bufs: &'a mut [Option<Vec<f64>>],
}

impl Grads<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, or `None` when `v` does not require one.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.slot(v) {
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    track_params: bool,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    /// Graph whose parameters require gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            track_params: true,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    /// Graph that records forward values only.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.leaf(shape, value, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.leaf(shape, value, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), self.track_params);
        self.param_vars.insert(id, v);
        v
    }

    /// Appends an operation node. The op is kept only if some input needs a
    /// gradient.
    pub fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var],
        op: impl Op + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.any_requires_grad(inputs);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: requires_grad.then(|| Box::new(op) as Box<dyn Op>),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Shape as `(rows, cols)`, or a dimension error if not 2-D.
    pub fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Backpropagates an explicit output gradient `seed` from `root`.
    pub fn backward_from(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        let node = &self.nodes[root.0];
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward root does not depend on any tensor that requires a gradient".into(),
            ));
        }
        if seed.len() != node.value.len() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: node.shape.clone(),
                rhs: vec![seed.len()],
            });
        }
        let nodes = &self.nodes[..=root.0];
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        bufs[root.0] = Some(seed);
        for i in (0..nodes.len()).rev() {
            let Some(op) = &nodes[i].op else { continue };
            let Some(g) = bufs[i].take() else { continue };
            let values = Values { nodes };
            let mut grads = Grads {
                nodes,
                bufs: &mut bufs,
            };
            op.backward(&values, Var(i), &g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .filter(|(_, v)| bufs.get(v.0).is_some_and(Option::is_some))
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { bufs, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut ps = self.params.clone();
        ps.sort();
        ps.into_iter()
            .filter_map(move |(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}
