//! Dense row-major tensors with a dynamic reverse-mode tape.
//!
//! Every op eagerly computes its output and, when gradient recording is on and
//! at least one input requires a gradient, attaches a backward closure plus
//! handles to its inputs. [`Tensor::backward`] walks that graph in reverse
//! topological order and returns a [`Gradients`] map keyed by tensor id.
//!
//! Tensors are generic over the element type: `f32` is the working precision,
//! `f64` exists so finite-difference checks have enough headroom.

mod checkpoint;
mod conv;
mod nn;
mod ops;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::Conv2dOptions;
pub use nn::{drop_path, MhaWeights, GELU_COEFF, GELU_SQRT_2_OVER_PI, MASK_NEG};
pub(crate) use nn::{gelu_derivative, gelu_value};
pub use optim::{lr_schedule, AdamW, GroupHyper, ParamGroup, ParamId, ParamStore, Parameter};

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_like::RealOps;

/// Element types the engine can run in.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + RealOps
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` over raw strided buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn zero() -> Self {
        Self::default()
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

mod num_like {
    /// The transcendental subset the kernels need.
    pub trait RealOps: Sized {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn tanh(self) -> Self;
        fn cos(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn powi(self, n: i32) -> Self;
        fn is_finite(self) -> bool;
        fn floor(self) -> Self;
    }

    macro_rules! impl_real_ops {
        ($t:ty) => {
            impl RealOps for $t {
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn tanh(self) -> Self {
                    <$t>::tanh(self)
                }
                #[inline]
                fn cos(self) -> Self {
                    <$t>::cos(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn powi(self, n: i32) -> Self {
                    <$t>::powi(self, n)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn floor(self) -> Self {
                    <$t>::floor(self)
                }
            }
        };
    }
    impl_real_ops!(f32);
    impl_real_ops!(f64);
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Errors raised by tensor construction and shape-checked ops.
#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, detail: detail.into() }
}

/// Backward closure: receives the upstream gradient and the op's output data,
/// returns one optional gradient per recorded input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradNode<T: Real> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<GradNode<T>>,
}

impl<T: Real> Drop for Inner<T> {
    // Long op chains would otherwise drop recursively and can exhaust the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = match self.node.take() {
            Some(node) => node.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}

/// An immutable n-dimensional array, possibly part of a recorded graph.
pub struct Tensor<T: Real = f32>(Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape())?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops on this thread currently record backward closures.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Real> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, node: Option<GradNode<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// A constant (non-tracked) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Like [`Tensor::new`] but panics on a length mismatch; for literals in tests and kernels.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        Self::new(data, shape).expect("tensor data length must match shape")
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    /// A leaf that gradients are collected for.
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_vec(data, shape).requires_grad()
    }

    /// Returns a fresh leaf sharing this tensor's data, with gradient tracking on.
    pub fn requires_grad(self) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), true, None)
    }

    /// Returns a fresh constant sharing this tensor's data.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
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

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.0.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Converts element type; the result is an untracked constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(self.data().iter().map(|v| U::from_f64(v.to_f64())).collect(), self.shape())
    }

    /// Builds an op output, recording `backward` only when it is needed.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        let node = track.then(|| GradNode {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::from_parts(shape, Arc::new(data), track, node)
    }

    /// A view with a new shape over the same buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        let track = grad_enabled() && self.0.requires_grad;
        let node = track.then(|| GradNode {
            inputs: vec![self.clone()],
            backward: Box::new(|g: &[T], _: &[T]| vec![Some(g.to_vec())]) as BackwardFn<T>,
        });
        Ok(Self::from_parts(shape.to_vec(), Arc::clone(&self.0.data), track, node))
    }

    /// Reverse-mode sweep from a scalar output (seed gradient 1).
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.numel(), 1, "backward() needs a scalar output, got shape {:?}", self.shape());
        self.backward_with(vec![T::one()])
    }

    /// Reverse-mode sweep with an explicit upstream gradient for this tensor.
    pub fn backward_with(&self, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.numel());
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        let mut leaves: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => {
                    if t.0.requires_grad {
                        accumulate(&mut leaves, t.id(), grad);
                    }
                }
                Some(node) => {
                    let input_grads = (node.backward)(&grad, t.data());
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, g) in node.inputs.iter().zip(input_grads) {
                        if let (Some(g), true) = (g, input.0.requires_grad) {
                            debug_assert_eq!(g.len(), input.numel());
                            accumulate(&mut pending, input.id(), g);
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        // Iterative post-order DFS.
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.0.requires_grad && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Real>(map: &mut HashMap<u64, Vec<T>>, id: u64, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(id, g);
        }
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Real> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
