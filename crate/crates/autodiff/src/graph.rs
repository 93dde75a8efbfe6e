use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Computes parent gradients from the output gradient and the parent values.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// A graph lives for one forward (and optional backward) pass. Graphs built
/// with [`Graph::inference`] never record backward closures.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Arc::new(value), Vec::new(), None, false)
    }

    /// Input that accumulates a gradient when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.insert(
            Arc::new(value),
            Vec::new(),
            None,
            requires_grad && self.grad_enabled,
        )
    }

    /// Bind a named parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { graph: self, id };
        }
        let value = store
            .get_arc(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let var = self.insert(value, Vec::new(), None, self.grad_enabled);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    fn insert(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Record an operation. The closure is dropped when no parent needs a gradient.
    pub(crate) fn op<F>(
        &self,
        value: impl Into<Arc<Tensor<T>>>,
        parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(value.into(), ids, backward, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let parent_grads = backward(&grad, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients of every parameter bound into this graph, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let nodes = self.nodes.borrow();
        self.params
            .borrow()
            .iter()
            .map(|(name, &id)| {
                let g = grads.grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Per-node gradients produced by [`Graph::backward`]; only leaves keep theirs.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().as_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}
