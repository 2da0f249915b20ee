//! Tensor handle and the reverse-mode tape.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive};

/// Element type of the engine. f32 for training and sampling, f64 for
/// gradient-check mode; both are compiled, selection is per call site.
pub trait Scalar:
    Float + FromPrimitive + std::iter::Sum + fmt::Debug + Default + Send + Sync + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE_TAG: u8;

}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
}
impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
}

/// Shorthand for converting literals into the active scalar type.
#[inline]
pub fn real<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 -> scalar")
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Run `f` with graph recording disabled (inference / sampling).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Context handed to a backward closure.
pub struct BackwardCtx<'a, S: Scalar> {
    pub out_grad: &'a [S],
    pub out_data: &'a [S],
    pub parents: &'a [Tensor<S>],
}

struct Op<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: Box<dyn Fn(&BackwardCtx<'_, S>)>,
}

struct Inner<S: Scalar> {
    id: u64,
    dims: Vec<usize>,
    data: Rc<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Option<Op<S>>,
}

/// Immutable n-dimensional array; cloning shares the underlying buffer.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}(grad={})", self.dims(), self.requires_grad())
    }
}

impl<S: Scalar> Tensor<S> {
    fn build(dims: Vec<usize>, data: Rc<Vec<S>>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                dims,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant tensor (not tracked by the tape).
    pub fn from_vec(dims: Vec<usize>, data: Vec<S>) -> Self {
        Self::build(dims, Rc::new(data), false, None)
    }

    /// Leaf tensor that accumulates gradients (a parameter snapshot).
    pub fn leaf(dims: Vec<usize>, data: Vec<S>) -> Self {
        Self::build(dims, Rc::new(data), true, None)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::from_vec(dims, vec![S::zero(); n])
    }

    pub fn full(dims: Vec<usize>, v: S) -> Self {
        let n = dims.iter().product();
        Self::from_vec(dims, vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(vec![1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.inner.data)
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the gradient buffer, allocating zeros on first touch.
    /// No-op (returns None) on tensors outside the tape.
    pub(crate) fn grad_mut<R>(&self, f: impl FnOnce(&mut [S]) -> R) -> Option<R> {
        if !self.inner.requires_grad {
            return None;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![S::zero(); self.len()]);
        Some(f(g))
    }

    /// Accumulate `delta` into the gradient.
    pub(crate) fn accum_grad(&self, delta: &[S]) {
        self.grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        });
    }

    /// Construct an op node. When the tape is disabled or no parent is
    /// tracked, the result is a plain constant.
    pub(crate) fn from_op(
        dims: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&BackwardCtx<'_, S>) + 'static,
    ) -> Self {
        Self::from_op_shared(dims, Rc::new(data), parents, backward)
    }

    pub(crate) fn from_op_shared(
        dims: Vec<usize>,
        data: Rc<Vec<S>>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&BackwardCtx<'_, S>) + 'static,
    ) -> Self {
        let tracked = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if tracked {
            Self::build(dims, data, true, Some(Op { parents, backward: Box::new(backward) }))
        } else {
            Self::build(dims, data, false, None)
        }
    }

    /// Reverse pass from a scalar loss. Consumes gradients of interior
    /// nodes as it goes; leaves keep theirs for the optimizer.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() needs a scalar loss");
        if !self.inner.requires_grad {
            return;
        }
        // Post-order DFS over parent edges, iterative to bound stack depth.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                topo.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        self.grad_mut(|g| g[0] = S::one());
        for node in topo.iter().rev() {
            if let Some(op) = &node.inner.op {
                let grad = node.inner.grad.borrow_mut().take();
                if let Some(g) = grad {
                    let ctx = BackwardCtx {
                        out_grad: &g,
                        out_data: node.data(),
                        parents: &op.parents,
                    };
                    (op.backward)(&ctx);
                }
            }
        }
    }

    /// Detach from the tape: same buffer, no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::build(self.dims().to_vec(), self.shared_data(), false, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn backward_through_shared_node() {
        // y = x * x, dy/dx = 2x
        let x = Tensor::<f64>::leaf(vec![3], vec![1.0, -2.0, 0.5]);
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y);
        loss.backward();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn no_grad_suppresses_tape() {
        let x = Tensor::<f32>::leaf(vec![2], vec![1.0, 2.0]);
        let y = no_grad(|| ops::mul(&x, &x).unwrap());
        assert!(!y.requires_grad());
        let loss = ops::sum_all(&y);
        loss.backward();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_get_no_grad() {
        let x = Tensor::<f32>::from_vec(vec![2], vec![1.0, 2.0]);
        let y = ops::mul(&x, &x).unwrap();
        assert!(!y.requires_grad());
    }
}
