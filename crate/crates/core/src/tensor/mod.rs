//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Every op that consumes a tensor requiring gradients records a backward
//! closure on its output. [`Tensor::backward`] walks the recorded graph once,
//! accumulates gradients into leaf tensors and frees the graph as it goes.

mod conv;
mod elementwise;
mod fft;
pub mod gradcheck;
mod layout;
mod norm;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

pub use conv::{conv2d, ConvSpec};
pub use elementwise::{activation, Activation};
pub use fft::{fft2, ifft2, spectrum_weights, ComplexPair};
pub(crate) use fft::{irfft2_planes, rfft2_planes};
pub use layout::{concat, split};
pub use norm::{batch_norm, BnMode, BnStats, BN_EPS, BN_MOMENTUM};

pub const MAX_ORDER: usize = 4;

/// Maps the output gradient (and which inputs need one) to per-input gradients.
type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Mutex<Option<GradFn<T>>>,
}

/// N-dimensional (order <= 4) real array, row-major, batch x channel x height x width for features.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}, requires_grad={}", self.shape(), self.requires_grad())?;
        if let Some(g) = self.node.grad_fn.lock().unwrap().as_ref() {
            write!(f, ", grad_fn={}", g.name)?;
        }
        write!(f, ")")
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > MAX_ORDER {
        return dim_err(format!("order {} exceeds {MAX_ORDER}", shape.len()));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return dim_err(format!("shape {shape:?} holds {n} elements, data has {len}"));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: Mutex::new(grad_fn),
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![value; n], shape).expect("full: order too large")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    /// Returns a leaf copy of this tensor with gradient tracking switched on.
    pub fn requires_grad_(self) -> Self {
        let shape = self.node.shape.clone();
        let data = match Arc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(shared) => shared.data.clone(),
        };
        Self::from_parts(shape, data, true, None)
    }

    /// Leaf copy that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => dim_err(format!("expected a 4-order tensor, got shape {s:?}")),
        }
    }

    pub fn order(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn item(&self) -> T {
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.lock().unwrap().is_none()
    }

    /// Accumulated gradient, as a plain (non-tracking) tensor.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.node
            .grad
            .lock()
            .unwrap()
            .as_ref()
            .map(|g| Self::from_parts(self.node.shape.clone(), g.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().unwrap() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    /// Element-type conversion; the result is a non-tracking leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::from_parts(self.node.shape.clone(), data, false, None)
    }

    /// Records the output of an op. `backward` maps the output gradient to one
    /// optional gradient per entry of `inputs`.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::from_parts(shape, data, track, grad_fn)
    }

    /// Reverse-mode accumulation from a scalar. Leaf gradients are summed into
    /// their `grad` slot; the recorded graph is released.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(Arc::as_ptr(&self.node), vec![T::one()]);

        for tensor in order.iter().rev() {
            let key = Arc::as_ptr(&tensor.node);
            let Some(g) = grads.remove(&key) else {
                continue;
            };
            let grad_fn = tensor.node.grad_fn.lock().unwrap().take();
            match grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.inputs.iter().map(|i| i.requires_grad()).collect();
                    let input_grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}: arity", gf.name);
                    for (input, ig) in gf.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}: grad length", gf.name);
                        match grads.entry(Arc::as_ptr(&input.node)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&ig) {
                                    *a = *a + *b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = tensor.node.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a = *a + *b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked subgraph (inputs before consumers).
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Arc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let inputs: Vec<Tensor<T>> = t
                .node
                .grad_fn
                .lock()
                .unwrap()
                .as_ref()
                .map(|g| g.inputs.iter().filter(|i| i.requires_grad()).cloned().collect())
                .unwrap_or_default();
            stack.push((t, true));
            for input in inputs.into_iter().rev() {
                if !visited.contains(&Arc::as_ptr(&input.node)) {
                    stack.push((input, false));
                }
            }
        }
        order
    }
}

/// Thread-local FLOP instrumentation for forward passes.
///
/// Only convolutions, batch norm, activations and FFTs are counted, using the
/// same per-op formulas as the analytic estimate in `network::flop_count`.
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
    }

    pub(crate) fn add(n: u64) {
        COUNTER.with(|c| {
            if let Some(v) = c.get() {
                c.set(Some(v + n));
            }
        });
    }

    /// Runs `f` and returns its result with the FLOPs it executed.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let prev = COUNTER.with(|c| c.replace(Some(0)));
        let out = f();
        let n = COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
        if let Some(p) = prev {
            COUNTER.with(|c| c.set(Some(p + n)));
        }
        (out, n)
    }

    pub fn conv(out_elems: u64, in_per_group: u64, kernel_area: u64, bias: bool) -> u64 {
        2 * out_elems * in_per_group * kernel_area + if bias { out_elems } else { 0 }
    }

    pub fn batch_norm(elems: u64) -> u64 {
        2 * elems
    }

    pub fn activation(elems: u64) -> u64 {
        elems
    }

    /// `5 N log2 N` per 2-D transform of an `h x w` plane.
    pub fn fft_plane(h: usize, w: usize) -> u64 {
        let n = (h * w) as f64;
        if n <= 1.0 {
            return 0;
        }
        (5.0 * n * n.log2()).round() as u64
    }
}
