use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether newly created operations are recorded for differentiation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording state when dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { previous }
}

fn set_grad_enabled(enabled: bool) -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|c| c.replace(enabled));
    NoGradGuard { previous }
}

/// Backward rule: `(upstream gradient, op inputs, op output) -> input gradients`.
pub(crate) type BackwardFn = Box<dyn Fn(&Var, &[Var], &Var) -> Vec<Option<Var>>>;

struct GradFn {
    inputs: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node in the computation graph.
///
/// Cloning is cheap (reference counted). Values are immutable once created.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    fn from_node(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::from_node(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn parameter(value: Tensor) -> Self {
        Self::from_node(value, true, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Records an operation. The node only tracks its inputs when recording is
    /// enabled and at least one input requires gradients.
    pub(crate) fn op(value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Self {
        if is_grad_enabled() && inputs.iter().any(Var::requires_grad) {
            Self::from_node(value, true, Some(GradFn { inputs, backward }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Element `i` in logical (row-major) order.
    pub fn item_at(&self, i: usize) -> f64 {
        *self.0.value.iter().nth(i).expect("index out of range")
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Gradients of a scalar `output` with respect to `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(
        output.len(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let seed = Var::constant(ArrayD::from_elem(IxDyn(output.shape()), 1.0));
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product of `output` against `seed`.
pub fn grad_with_seed(output: &Var, seed: Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let _guard = set_grad_enabled(create_graph);

    // Node ids increase monotonically and inputs always precede outputs, so
    // visiting in decreasing id order is a valid reverse topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(f) = &v.0.grad_fn {
            stack.extend(f.inputs.iter().filter(|i| i.requires_grad()).cloned());
        }
        order.push(v);
    }
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let wanted: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let mut pending: HashMap<u64, Var> = HashMap::new();
    let mut results: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        pending.insert(output.id(), seed);
    }

    for node in &order {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        if wanted.contains(&node.id()) {
            results.insert(node.id(), g.clone());
        }
        let Some(f) = &node.0.grad_fn else {
            continue;
        };
        let input_grads = (f.backward)(&g, &f.inputs, node);
        debug_assert_eq!(input_grads.len(), f.inputs.len());
        for (input, ig) in f.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(ig.shape(), input.shape(), "gradient shape mismatch");
            let acc = match pending.remove(&input.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            pending.insert(input.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            results
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::zeros(w.shape()))
        })
        .collect()
}
