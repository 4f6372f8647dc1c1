//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] replays the closures in reverse order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::param::Param;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent. The mask says
/// which parents actually need theirs.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<u64, usize>>,
    buffer_updates: RefCell<HashMap<u64, Tensor>>,
    grad_enabled: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
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
            params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no backward closures are kept.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push_node(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, vec![], None, false)
    }

    /// Input that receives a gradient (e.g. the image optimised by an inversion attack).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, vec![], None, self.grad_enabled)
    }

    /// Registers a parameter; repeated registrations of the same parameter share a node.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.uid()) {
            return Var { tape: self, id };
        }
        let v = self.push_node(p.value.clone(), vec![], None, self.grad_enabled && p.trainable);
        self.params.borrow_mut().insert(p.uid(), v.id);
        v
    }

    /// Records a new value for a non-trainable buffer (running statistics).
    pub fn push_buffer_update(&self, uid: u64, value: Tensor) {
        self.buffer_updates.borrow_mut().insert(uid, value);
    }

    pub fn take_buffer_update(&self, uid: u64) -> Option<Tensor> {
        self.buffer_updates.borrow_mut().remove(&uid)
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        if requires_grad {
            self.push_node(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push_node(value, ids, None, false)
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0);
        grads[loss.id] = Some(seed);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = bw(&g, &mask);
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                    if !need {
                        continue;
                    }
                    if let Some(pg) = pg {
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads, params: self.params.borrow().clone() }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<u64, usize>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.uid()).and_then(|&id| self.grads[id].as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
