//! Reverse-mode differentiation over a per-forward tape.
//!
//! Every differentiable op appends a node holding its parents and a
//! backward closure. Values live in `Rc<Tensor>` handles so an inference
//! tape (gradients disabled) records nothing and intermediates are freed as
//! soon as their `Var`s drop.

use std::cell::RefCell;
use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Maps the output gradient to one optional gradient per input. The slice
/// flags which inputs actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records; every `Var` it produces is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
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

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.grad_enabled.then(|| self.push(Node {
            inputs: Vec::new(),
            backward: None,
        }));
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records an op result. The closure is dropped without being stored when
    /// no input requires a gradient.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = (self.grad_enabled && ids.iter().any(Option::is_some)).then(|| {
            self.push(Node {
                inputs: ids,
                backward: Some(Box::new(backward)),
            })
        });
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Propagates `d root / d node` to every leaf reachable from `root`.
    ///
    /// `root` must hold a single element.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        assert_eq!(root.value.len(), 1, "backward needs a scalar root");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Gradients { grads };
        };
        grads[root_id] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..=root_id).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.inputs.len());
            for (pid, pg) in node.inputs.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (pid, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// The gradient for `var`, zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Option<usize>,
    pub(crate) value: Rc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: Rc::clone(&self.value),
        }
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// A tape bound to a parameter store. Each parameter becomes one leaf the
/// first time it is used, so reuse accumulates into a single gradient.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: RefCell<Vec<Option<(Option<usize>, Rc<Tensor>)>>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_tape(store, Tape::inference())
    }

    fn with_tape(store: &'p ParamStore, tape: Tape) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'_> {
        let mut bound = self.bound.borrow_mut();
        if let Some((leaf, value)) = &bound[id.0] {
            return Var {
                tape: &self.tape,
                id: *leaf,
                value: Rc::clone(value),
            };
        }
        let var = self.tape.leaf(self.store.value(id).clone());
        bound[id.0] = Some((var.id, var.value_rc()));
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.tape.constant(value)
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.tape.leaf(value)
    }

    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        self.tape.backward(root)
    }

    /// Gradients of every parameter the forward touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                let (leaf, _) = b.as_ref()?;
                let g = grads.grads.get((*leaf)?)?.as_ref()?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }
}
