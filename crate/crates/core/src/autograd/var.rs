use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A node in a define-by-run computation graph.
///
/// Graph edges are only recorded when at least one input requires a
/// gradient, so inference with constant parameters keeps no history and
/// intermediate buffers are released as soon as they go out of scope.
/// Node ids grow monotonically, so descending id order is a valid reverse
/// topological order for backpropagation.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<T: Scalar> Var<T> {
    fn new_node(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Var(Rc::new(Node { id, value, requires_grad, grad_fn }))
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new_node(value, false, None)
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn param(value: Tensor<T>) -> Self {
        Self::new_node(value, true, None)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::new_node(value, requires_grad, None)
    }

    /// Records an operation result. `backward` maps the output gradient to one
    /// optional gradient per parent; the flag slice tells which parents need one.
    pub(crate) fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::new_node(value, true, Some(GradFn { parents, backward: Box::new(backward) }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode differentiation of this node, seeded with ones.
    ///
    /// Returns gradients for every leaf that requires one.
    pub fn backward(&self) -> Gradients<T> {
        let seed = Tensor::full(self.shape(), T::one());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }

        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(v) = stack.pop() {
            if let Some(gf) = &v.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        grads.insert(self.id(), seed);
        for v in &order {
            let Some(gf) = &v.0.grad_fn else { continue };
            let Some(g) = grads.remove(&v.id()) else { continue };
            let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = (gf.backward)(&g, &needs);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                assert_eq!(pg.shape(), p.shape(), "gradient shape for parent of node {}", v.id());
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&v.id())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
