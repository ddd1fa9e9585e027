//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every operation on tensors that require gradients records a node holding
//! its parents and a backward closure. [`Tensor::backward`] walks the recorded
//! graph in reverse topological order and accumulates partial derivatives into
//! the gradient buffers of the leaf tensors.

mod gradcheck;
pub mod monitor;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub use gradcheck::grad_check;
pub use ops::{broadcast_shape, Elementwise};

/// Maps the upstream gradient to one optional gradient per parent. The
/// `needs` mask says which parents actually require a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage; use [`Tensor::detach`] for an independent copy.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Multiply-accumulate operations executed by matmul and conv2d on this
/// thread since the last [`reset_mac_counter`].
pub fn mac_counter() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_mac_counter() {
    MACS.with(|m| m.set(0));
}

pub(crate) fn count_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} must be non-empty with positive extents"),
            ));
        }
        if numel(shape) != len {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
            ));
        }
        Ok(())
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::build(vec![n, n], d, false, None)
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RandomSource) -> Self {
        let d = (0..numel(shape)).map(|_| rng.uniform_range(lo, hi)).collect();
        Self::build(shape.to_vec(), d, false, None)
    }

    /// Fan-in scaled normal initialisation, `std = sqrt(2 / fan_in)`, as a
    /// trainable leaf.
    pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut RandomSource) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let d = (0..numel(shape)).map(|_| rng.normal() * std).collect();
        Self::build(shape.to_vec(), d, true, None)
    }

    /// Records an operation result. The node keeps its parents only when
    /// gradients are enabled and some parent requires them.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = track.then(|| Op {
            name,
            parents,
            backward,
        });
        Self::build(shape, data, track, op)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Overwrites the values in place; the shape must not change.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::invalid(
                "set_data",
                format!("expected {} values, got {}", d.len(), values.len()),
            ));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Applies `f` to the value buffer in place (used by optimisers).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// New constant leaf with a copy of the values.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Backpropagates from a single-element tensor. Gradients accumulate
    /// additively into every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.op {
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(|p| p.requires_grad()).collect();
                    let pgs = (op.backward)(&g, &needs);
                    for ((p, pg), need) in op.parents.iter().zip(pgs).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph: parents precede the
    /// nodes that consume them.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<f64> = d.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("values", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
        assert_eq!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn backward_on_sum() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_on_square() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::NonScalar(_))));
    }

    #[test]
    fn shared_subexpression_gradient() {
        // y = x*x + x, reused node
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&x).unwrap().add(&sq).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![13.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(grad_enabled());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0).detach();
        assert!(!y.requires_grad());
        assert_eq!(y.to_vec(), vec![2.0, 4.0]);
    }
}
