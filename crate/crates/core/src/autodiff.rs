//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and (when recording) a closure mapping the output gradient to one
//! gradient per input. Nodes are appended in topological order, so the
//! backward sweep is a single pass over the tape in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `(grad_out, inputs, output) -> grad per input`
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Rc<Tensor<T>>], &Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A graph that only evaluates; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        });
        Var { graph: self, id }
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: self.record,
        });
        Var { graph: self, id }
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let node = self.push(Node {
            value: Rc::new(store.value(id).clone()),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            requires_grad: self.record,
        });
        self.param_nodes.borrow_mut().insert(id, node);
        Var {
            graph: self,
            id: node,
        }
    }

    pub(crate) fn op(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            self.record && parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            param: None,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must hold one element, got {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root_val.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(gout) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Tensor<T>>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let pgrads = bw(&gout, &inputs, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(pgrads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (`Graph::leaf` or `Graph::param`) node.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (p, g) in self.param_grads() {
            store.accumulate_grad(p, g);
        }
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Forward context: the tape plus the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self { graph, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }
}
