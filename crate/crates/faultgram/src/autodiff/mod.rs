//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Every operation records its inputs in a DAG of reference-counted nodes.
//! [`grad`] walks the DAG in reverse topological order and builds the
//! cotangents *out of the same recorded operations*, so gradients are
//! themselves differentiable. That second-order capability is what lets the
//! WGAN-GP critic loss backpropagate through the input-gradient norm of its
//! penalty term.
//!
//! The engine is deliberately small: shapes must match exactly (broadcasting
//! is explicit via [`Tensor::broadcast_to`]), everything is `f64`, and shape
//! misuse panics. Spec-level error reporting happens in the layers above.

mod adam;
mod conv;
mod ops;

pub use adam::Adam;
pub use conv::{conv2d, conv2d_grad_input, conv2d_grad_weight, conv_transpose2d, maxpool2d};
pub use ops::concat;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule of one recorded operation.
///
/// Implementations receive the cotangent of the output and must return one
/// cotangent per parent (or `None` for parents that do not require
/// gradients). The returned tensors must be built from engine ops so that
/// they stay differentiable.
pub(crate) trait BackwardOp {
    fn backward(&self, parents: &[Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
    fn name(&self) -> &'static str;
}

struct Node {
    id: u64,
    data: ArrayD<f64>,
    parents: Vec<Tensor>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// A dense `f64` tensor participating in the autodiff graph.
///
/// Cloning is cheap (reference-counted handle). Tensors are immutable once
/// created; optimizers produce new leaves rather than mutating in place.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    /// Constant tensor; gradients do not flow into it.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data,
                parents: Vec::new(),
                op: None,
                requires_grad: false,
            }),
        }
    }

    /// Leaf tensor that gradients are taken with respect to.
    pub fn var(data: ArrayD<f64>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data,
                parents: Vec::new(),
                op: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    /// Uniform in `[-bound, bound)`; used for fan-in-scaled initialization.
    pub fn rand_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/len"))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        op: Box<dyn BackwardOp>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        // Inference-only subgraphs carry no history; this keeps generated
        // graphs from growing when nothing upstream is differentiable.
        if !requires_grad {
            return Tensor::constant(data);
        }
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data,
                parents,
                op: Some(op),
                requires_grad,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of len {}", self.len());
        *self.node.data.iter().next().expect("nonempty")
    }

    /// Same data, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .field(
                "op",
                &self.node.op.as_ref().map(|o| o.name()).unwrap_or("leaf"),
            )
            .finish()
    }
}

/// Gradients of a scalar `output` with respect to each tensor in `inputs`.
///
/// The returned tensors are part of the graph, so they can be differentiated
/// again (needed for the gradient penalty). Inputs that `output` does not
/// depend on get zero tensors of the matching shape.
pub fn grad(output: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
    assert_eq!(output.len(), 1, "grad() expects a scalar output");

    // Reverse topological order via iterative post-order DFS.
    let mut topo: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(output.clone(), 0)];
    while let Some((t, child_idx)) = stack.pop() {
        if child_idx == 0 {
            if !visited.insert(t.id()) {
                continue;
            }
        }
        let parents = &t.node.parents;
        let mut next = child_idx;
        while next < parents.len() {
            let p = &parents[next];
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((t.clone(), next + 1));
                stack.push((p.clone(), 0));
                break;
            }
            next += 1;
        }
        if next >= parents.len() {
            topo.push(t);
        } else {
            continue;
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape()));

    for t in topo.iter().rev() {
        let Some(g) = grads.get(&t.id()).cloned() else {
            continue;
        };
        let Some(op) = t.node.op.as_ref() else {
            continue;
        };
        let parent_grads = op.backward(&t.node.parents, t, &g);
        assert_eq!(
            parent_grads.len(),
            t.node.parents.len(),
            "{} backward arity",
            op.name()
        );
        for (p, pg) in t.node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            assert_eq!(
                pg.shape(),
                p.shape(),
                "{} backward shape for parent",
                op.name()
            );
            match grads.remove(&p.id()) {
                Some(acc) => {
                    grads.insert(p.id(), &acc + &pg);
                }
                None => {
                    grads.insert(p.id(), pg);
                }
            }
        }
    }

    inputs
        .iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// A named, updatable parameter slot.
///
/// Layers keep clones of the slot; the optimizer swaps in a fresh leaf tensor
/// on every step, so graphs built from earlier values stay valid.
#[derive(Clone)]
pub struct Param {
    name: String,
    slot: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value as a graph leaf.
    pub fn tensor(&self) -> Tensor {
        self.slot.borrow().clone()
    }

    pub fn set(&self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.slot.borrow().shape(),
            "param {} shape changed",
            self.name
        );
        *self.slot.borrow_mut() = value;
    }

    pub fn set_data(&self, data: ArrayD<f64>) {
        self.set(Tensor::var(data));
    }
}

/// Ordered collection of the parameters of one network.
///
/// Order is creation order and is what the optimizer and the checkpoint
/// writer iterate, so it is part of the determinism contract.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: ArrayD<f64>) -> Param {
        assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        let p = Param {
            name: name.to_string(),
            slot: Rc::new(RefCell::new(Tensor::var(data))),
        };
        self.params.push(p.clone());
        p
    }

    /// Fan-in-scaled uniform weight: `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    pub fn add_fan_in<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Param {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(
            name,
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/len"),
        )
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Param {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64) -> Param {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor().len()).sum()
    }

    /// Current values as leaf tensors, in creation order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor().all_finite())
    }
}
