use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

// Node ids are globally monotonic, so a node is always newer than its parents
// and descending id order is a valid reverse topological order.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any operations, so intermediates are dropped
/// as soon as they go out of scope.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) struct BackwardCtx<'a> {
    pub grad_out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct GradFn {
    op: &'static str,
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    grad_fn: Option<GradFn>,
}

/// A tensor participating in the autograd graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub(crate) fn from_op(op: &'static str, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let track = is_grad_enabled() && parents.iter().any(Var::requires_grad);
        let grad_fn = track.then(|| GradFn { op, parents, backward });
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: track,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Back-propagates from this scalar, accumulating into leaf gradients.
    pub fn backward(&self) -> Result<Tape> {
        let tape = Tape::record(self)?;
        tape.backward()?;
        Ok(tape)
    }

    fn parents(&self) -> &[Var] {
        self.0.grad_fn.as_ref().map_or(&[], |g| g.parents.as_slice())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

/// The differentiable operations reachable from a loss, in reverse
/// topological order.
pub struct Tape {
    order: Vec<Var>,
}

impl Tape {
    pub fn record(root: &Var) -> Result<Self> {
        if !root.value().is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Err(Error::InvalidArgument("loss does not depend on any leaf that requires a gradient".into()));
        }
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut order = Vec::new();
        seen.insert(root.id());
        while let Some(node) = stack.pop() {
            for parent in node.parents() {
                if parent.id() >= node.id() {
                    return Err(Error::GraphCycle { child: node.id(), parent: parent.id() });
                }
                if parent.requires_grad() && seen.insert(parent.id()) {
                    stack.push(parent.clone());
                }
            }
            order.push(node);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Names of the recorded ops, leaves excluded, in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.order.iter().rev().filter_map(|v| v.0.grad_fn.as_ref().map(|g| g.op)).collect()
    }

    fn backward(&self) -> Result<()> {
        let root = &self.order[0];
        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(root.id(), Tensor::ones(root.shape().to_vec()));
        let mut visited = HashSet::with_capacity(self.order.len());

        for node in &self.order {
            assert!(visited.insert(node.id()), "node {} visited twice", node.id());
            let Some(grad_out) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&grad_out),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(gf) => {
                    let ctx = BackwardCtx {
                        grad_out: &grad_out,
                        inputs: gf.parents.iter().map(|p| p.value()).collect(),
                        output: node.value(),
                        needs: gf.parents.iter().map(Var::requires_grad).collect(),
                    };
                    let grads = (gf.backward)(&ctx);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "{}", gf.op);
                    for (parent, grad) in gf.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.shape(), parent.shape(), "{}", gf.op);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&grad),
                            None => {
                                pending.insert(parent.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn no_grad_restores_flag() {
        assert!(is_grad_enabled());
        no_grad(|| assert!(!is_grad_enabled()));
        assert!(is_grad_enabled());
    }

    #[test]
    fn ops_under_no_grad_are_constants() {
        let w = Var::leaf(Tensor::ones([3]), true);
        let y = no_grad(|| ops::scale(&w, 2.0).unwrap());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        let w = Var::leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let a = ops::mul(&w, &w).unwrap();
        let b = ops::add(&a, &a).unwrap();
        let loss = ops::sum(&b).unwrap();
        let tape = loss.backward().unwrap();
        // w, mul, add, sum
        assert_eq!(tape.len(), 4);
        // d/dw sum(2 w^2) = 4 w
        assert_eq!(w.grad().unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let w = Var::leaf(Tensor::ones([3]), true);
        assert!(matches!(w.backward(), Err(Error::NonScalarLoss(_))));
    }
}
