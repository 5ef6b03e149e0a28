//! A small dense-tensor kernel with reverse-mode differentiation.
//!
//! Values are 64-bit, row-major. Computations are recorded on a [`Tape`];
//! parameters live in a [`ParamStore`] and are copied onto the tape lazily
//! through a [`Binder`].

pub mod gradcheck;
mod gemm;
mod optim;
mod tape;

pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("positive extents")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("positive extents")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, trainable parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Weight of a `fan_in`-input layer: uniform in `±sqrt(1/fan_in)`.
    pub fn register_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.register(name, Tensor::from_vec(shape, data).expect("positive extents"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites parameter values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layout");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
    }
}

/// Per-tape cache of parameters copied onto a tape.
#[derive(Debug)]
pub struct Binder<'p> {
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Binder {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// The tape variable for `id`, recording a leaf on first use.
    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        *self.bound[id.0].get_or_insert_with(|| tape.leaf(&self.store.tensors[id.0]))
    }

    /// Parameters that were bound, with their variables.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Accumulates the gradients of every bound parameter into `grads_out`,
    /// indexed like the store.
    pub fn collect_grads(&self, grads: &Gradients, grads_out: &mut [Vec<f64>]) {
        for (id, v) in self.bound() {
            if let Some(g) = grads.get(v) {
                let dst = &mut grads_out[id.0];
                if dst.is_empty() {
                    dst.resize(g.len(), 0.0);
                }
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }
    }
}
