//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every op that touches a tensor with `requires_grad` records a backward
//! closure on the output node. [`Tensor::backward`] walks the recorded graph
//! in reverse topological order, accumulates gradients into leaves and
//! consumes the graph as it goes, so a second call without a fresh forward
//! pass is an error.
//!
//! Tensors are reference counted with `Rc` and are therefore confined to one
//! thread. Independent model instances can live on independent threads.

mod conv;
mod element;
pub mod gradcheck;
mod norm;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use element::Element;
pub use gradcheck::grad_check;
pub use ops::concat;

use crate::error::{Error, Result};

pub(crate) struct BackwardCtx<'a, T> {
    pub out: &'a [T],
    pub grad: &'a [T],
    pub needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Element> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    is_leaf: bool,
    consumed: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: RefCell<Option<GradFn<T>>>,
}

/// An immutable n-dimensional array that may participate in a gradient graph.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape("new", format!("dims must be positive, got {shape:?}")));
    }
    if numel(shape) != len {
        return Err(Error::shape(
            "new",
            format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn leaf_unchecked(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            op: "leaf",
            shape,
            data,
            requires_grad,
            is_leaf: true,
            consumed: Cell::new(false),
            grad: RefCell::new(None),
            grad_fn: RefCell::new(None),
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Self::leaf_unchecked(shape.to_vec(), data, false))
    }

    /// A leaf tensor whose gradient is collected by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::leaf_unchecked(t.0.shape.clone(), t.0.data.clone(), true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        Self::leaf_unchecked(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Same values, detached from any graph, with the requested grad flag.
    pub fn detached(&self, requires_grad: bool) -> Self {
        Self::leaf_unchecked(self.0.shape.clone(), self.0.data.clone(), requires_grad)
    }

    /// Records an op output. `backward` is only kept when some input tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op} produced wrong length");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            backward: Box::new(backward),
        });
        Ok(Tensor(Rc::new(Node {
            op,
            shape,
            data,
            requires_grad,
            is_leaf: false,
            consumed: Cell::new(false),
            grad: RefCell::new(None),
            grad_fn: RefCell::new(grad_fn),
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
    }

    pub fn same_tensor(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Leaves created with [`Tensor::param`] accumulate `d root / d leaf`.
    /// The recorded graph is released afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.consumed.get() {
            return Err(Error::Graph(
                "graph already consumed by a previous backward; run forward again".into(),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::Graph("root is detached from every tracked leaf".into()));
        }
        if self.is_leaf() {
            accumulate(&mut self.0.grad.borrow_mut(), &[T::one()]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.key()) else {
                continue;
            };
            let Some(grad_fn) = node.0.grad_fn.borrow_mut().take() else {
                continue;
            };
            node.0.consumed.set(true);
            let needs: Vec<bool> = grad_fn.inputs.iter().map(|t| t.requires_grad()).collect();
            let ctx = BackwardCtx {
                out: &node.0.data,
                grad: &grad,
                needs: &needs,
            };
            let input_grads = (grad_fn.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), grad_fn.inputs.len(), "{}", node.0.op);
            for (input, g) in grad_fn.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "grad of {} input", node.0.op);
                if input.is_leaf() {
                    accumulate(&mut input.0.grad.borrow_mut(), &g);
                } else {
                    match grads.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            grads.insert(input.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Non-leaf nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = node.0.grad_fn.borrow().as_ref() {
                for input in &gf.inputs {
                    if !input.is_leaf() && input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) for strided loops.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f64>::param(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum_is_twice_input() {
        let vals = vec![0.5, -1.0, 2.0, 3.0];
        let x = Tensor::<f64>::param(&[4], vals.clone()).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad_vec().unwrap(), expect);
    }

    #[test]
    fn second_backward_is_an_error() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.scale(2.0).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_roots() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.scale(2.0).unwrap().backward().is_err());
        let c = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(c.sum().unwrap().backward().is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(a * a + a); dy/da = 2a + 1
        let a = Tensor::<f64>::param(&[2], vec![1.0, -3.0]).unwrap();
        let y = a.mul(&a).unwrap().add(&a).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![3.0, -5.0]);
    }
}
