use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::Float;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph on this thread.
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

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradient contributions for each parent, in parent order. `None` means the
/// parent does not need a gradient.
pub(crate) type ParentGrads<F> = Vec<Option<Vec<F>>>;

type BackwardFn<F> = Box<dyn Fn(&[F], &[F]) -> ParentGrads<F> + Send + Sync>;

struct GradFn<F: Float> {
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

/// Immutable dense row-major tensor with an optional backward graph.
///
/// Cloning is cheap (reference counted). Leaves created with [`Tensor::param`]
/// receive gradients from [`Tensor::backward`].
pub struct Tensor<F: Float = f32>(Arc<Node<F>>);

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    fn make(
        shape: Vec<usize>,
        data: Arc<Vec<F>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<F>>,
    ) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Untracked tensor.
    pub fn constant(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Self {
        Self::make(shape.into(), Arc::new(data), false, None)
    }

    /// Trainable leaf.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Self {
        Self::make(shape.into(), Arc::new(data), true, None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::constant(shape, vec![F::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: F) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::constant(shape, vec![v; n])
    }

    pub fn scalar(v: F) -> Self {
        Self::constant(vec![], vec![v])
    }

    /// Records an op result. The backward closure receives the output gradient
    /// and the output values and returns one optional gradient per parent.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&[F], &[F]) -> ParentGrads<F> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::make(shape, Arc::new(data), false, None);
        }
        Self::make(
            shape,
            Arc::new(data),
            true,
            Some(GradFn {
                parents,
                backward: Box::new(backward),
            }),
        )
    }

    /// Same data, new shape. Shares storage.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape()
        );
        let track = grad_enabled() && self.requires_grad();
        let grad_fn = track.then(|| GradFn {
            parents: vec![self.clone()],
            backward: Box::new(|g: &[F], _: &[F]| vec![Some(g.to_vec())]) as BackwardFn<F>,
        });
        Self::make(shape, Arc::clone(&self.0.data), track, grad_fn)
    }

    /// Untracked view of the same values.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Trainable leaf holding the same values.
    pub fn to_param(&self) -> Self {
        Self::make(self.0.shape.clone(), Arc::clone(&self.0.data), true, None)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        let data = self
            .data()
            .iter()
            .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        if self.requires_grad() && self.is_leaf() {
            Tensor::param(self.shape().to_vec(), data)
        } else {
            Tensor::constant(self.shape().to_vec(), data)
        }
    }

    /// Reverse-mode sweep from this tensor. Non-scalar outputs are seeded with ones.
    pub fn backward(&self) -> GradStore<F> {
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<F>> = HashMap::new();
        let mut leaves = GradStore {
            grads: HashMap::new(),
        };
        if !self.requires_grad() {
            return leaves;
        }
        pending.insert(self.id(), vec![F::one(); self.numel()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    leaves.grads.insert(node.id(), grad);
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&grad, node.data());
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(pg) {
                                    *a = *a + b;
                                }
                            }
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        leaves
    }

    /// Post-order over tracked nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of trainable leaves, keyed by tensor id.
#[derive(Default)]
pub struct GradStore<F: Float = f32> {
    grads: HashMap<usize, Vec<F>>,
}

impl<F: Float> GradStore<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
