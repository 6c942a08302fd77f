//! Dense N-D tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records a node on execution. The node
//! holds the parent tensors and a one-shot closure that maps the output
//! gradient to parent gradients. [`Tensor::backward`] walks the recorded
//! nodes in reverse creation order, accumulates gradients on leaves that
//! require them, and releases the graph.

mod gradcheck;
mod ops;
mod scalar;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use gradcheck::{gradcheck, gradcheck_piecewise, gradcheck_sampled, GradcheckReport};
pub(crate) use ops::channel_mean as channel_mean_op;
pub use ops::{channel_stats, concat_channels, matmul};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, Mat};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    leaf: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Mutex<Option<Node<T>>>,
}

/// Immutable N-D array that may participate in a differentiation graph.
///
/// Cloning is cheap and shares the buffer; every operation allocates a fresh
/// output buffer.
pub struct Tensor<T: Scalar = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = self.inner.node.lock().unwrap();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.inner.requires_grad);
        if let Some(n) = node.as_ref() {
            s.field("op", &n.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.inner.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let leaf = node.is_none();
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                leaf,
                grad: Mutex::new(None),
                node: Mutex::new(node),
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    /// Result of a differentiable op. A node is recorded only when some
    /// parent requires grad.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient, if backward reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Copy of the values as a new leaf with no history.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Copy of the values as a new leaf with the given grad flag.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), requires_grad, None)
    }

    /// Converts to another precision as a new leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(
            self.inner.shape.clone(),
            data,
            self.inner.requires_grad && self.is_leaf(),
            None,
        )
    }

    /// Name of the op that produced this tensor while its graph is alive.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.lock().unwrap().as_ref().map(|n| n.op)
    }

    /// Reverse-mode sweep from this scalar. Consumes the graph: a second call
    /// without re-executing the forward pass returns [`Error::GraphConsumed`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::Detached);
        }
        if !self.is_leaf() && self.inner.node.lock().unwrap().is_none() {
            return Err(Error::GraphConsumed);
        }

        // Reachable tensors. Ids are assigned at creation, so descending id
        // order is a reverse topological order of the executed graph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = t.inner.node.lock().unwrap().as_ref() {
                stack.extend(node.parents.iter().filter(|p| p.requires_grad()).cloned());
            } else if !t.is_leaf() {
                return Err(Error::GraphConsumed);
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if t.is_leaf() {
                let mut slot = t.inner.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let node = t.inner.node.lock().unwrap().take().ok_or(Error::GraphConsumed)?;
            let parent_grads = (node.backward)(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "grad extent from op {}", node.op);
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shape-checking helper shared by the op modules.
pub(crate) fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank-{rank} input, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}
