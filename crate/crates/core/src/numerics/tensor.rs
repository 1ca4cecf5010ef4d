//! Dense row-major tensors with a dynamically recorded reverse-mode graph.
//!
//! Every op result keeps `Arc` handles to the operands it was computed from
//! plus a closure that maps the output gradient onto operand gradients.
//! [`Tensor::backward`] walks that graph in reverse topological order.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Element type used for all storage and arithmetic.
pub type Scalar = f64;

/// Maps the output gradient (plus the output value and the operands) onto one
/// optional gradient per operand. `None` means "no contribution".
pub type BackwardFn =
    Box<dyn Fn(&[Scalar], &[Scalar], &[Tensor]) -> Vec<Option<Vec<Scalar>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Backward {
    parents: Vec<Tensor>,
    f: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Scalar>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<Scalar>>>,
    backward: Option<Backward>,
}

/// Immutable tensor handle. Cloning is cheap and shares the storage.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<Scalar>,
        requires_grad: bool,
        backward: Option<Backward>,
    ) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            backward,
        }))
    }

    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<Scalar>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<Scalar>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(t.into_parameter())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![1.0; numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    /// Rank-0 constant.
    pub fn scalar(value: Scalar) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false, None)
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::build(vec![n, n], data, false, None)
    }

    /// Builds an op result. Checks finiteness and attaches the backward
    /// closure only when recording is enabled and some operand needs it.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<Scalar>,
        parents: Vec<Tensor>,
        op_name: &str,
        f: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op_name}: bad output size");
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{op_name} produced non-finite value {} at index {pos}",
                data[pos]
            )));
        }
        let needs = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let backward = needs.then(|| Backward { parents, f });
        Ok(Tensor::build(shape, data, needs, backward))
    }

    /// Same storage, marked as a trainable leaf.
    pub fn into_parameter(self) -> Tensor {
        let (shape, data) = match Arc::try_unwrap(self.0) {
            Ok(node) => (node.shape, node.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Tensor::build(shape, data, true, None)
    }

    /// Copy cut out of the graph (stop-gradient).
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<Scalar> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Scalar> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Vec<Scalar>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Reverse topological order of every recorded node reachable from
    /// `self` that requires a gradient.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(bw) = &t.0.backward {
                for p in &bw.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order.reverse();
        order
    }

    /// Gradients of this scalar with respect to every reachable leaf that
    /// requires one. Leaves are left untouched.
    pub fn gradients(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads: HashMap<u64, Vec<Scalar>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads: leaves });
        }
        grads.insert(self.id(), vec![1.0]);
        for node in self.topo_order() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(bw) => {
                    let parent_grads = (bw.f)(&g, node.data(), &bw.parents);
                    debug_assert_eq!(parent_grads.len(), bw.parents.len());
                    for (p, pg) in bw.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    /// Accumulates d(self)/d(leaf) into every reachable leaf's grad buffer.
    pub fn backward(&self) -> Result<()> {
        let grads = self.gradients()?;
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            match &t.0.backward {
                None => {
                    if let Some(g) = grads.grads.get(&t.id()) {
                        let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g.clone()),
                        }
                    }
                }
                Some(bw) => stack.extend(bw.parents.iter().filter(|p| p.requires_grad()).cloned()),
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Tensor::gradients`], keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Vec<Scalar>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[Scalar]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<Scalar> {
        self.get(t).map_or_else(|| vec![0.0; t.numel()], <[Scalar]>::to_vec)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(Tensor::new(vec![1.0; 3], &[2, 2]), Err(Error::Shape(_))));
        assert_eq!(Tensor::scalar(2.0).numel(), 1);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::parameter(vec![3.0], &[]).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sum_and_mean_gradients() {
        let x = Tensor::parameter(vec![1.0, -2.0, 0.5, 4.0, 1.0, 1.0], &[2, 3]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);

        let y = Tensor::parameter(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        y.mean().unwrap().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(vec![3.0], &[]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gradients_add_up() {
        // y = (x + x) * x  => dy/dx = 4x
        let x = Tensor::parameter(vec![1.5], &[]).unwrap();
        let y = x.add(&x).unwrap().mul(&x).unwrap();
        let g = y.gradients().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        let z = x.mul(&x).unwrap();
        assert!(z.requires_grad());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::parameter(vec![2.0], &[]).unwrap();
        let y = x.mul(&x.detach()).unwrap();
        let g = y.gradients().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_finite_results_raise_numeric_error() {
        let x = Tensor::new(vec![1000.0], &[1]).unwrap();
        assert!(matches!(x.exp(), Err(Error::Numeric(_))));
    }
}
