//! Dense NCHW tensors and a Wengert tape for reverse-mode differentiation.
//!
//! Tensors are cheap-to-clone handles onto shared storage. Training runs in
//! f32; gradient checks run the same code in f64 (finite differences are
//! unreliable in single precision). Ops record a backward closure on the
//! [`Tape`]; [`Tape::backward`] replays them in reverse and accumulates
//! per-tensor gradients into a [`GradStore`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Scalar types the numeric stack is generic over (f32 for training,
/// f64 for gradient checks).
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an f64 constant into the working precision.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("constant not representable")
}

pub type TensorId = u64;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major N-dimensional array with an identity used by the tape.
///
/// Cloning copies the handle, not the data. The data sits behind a lock so
/// the optimizer can update parameters in place and every handle (graph
/// nodes, checkpoints) observes the new values.
pub struct Tensor<T> {
    id: TensorId,
    shape: Arc<[usize]>,
    data: Arc<RwLock<Vec<T>>>,
    requires_grad: bool,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: self.id,
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.id, self.shape, self.requires_grad
        )
    }
}

impl<T: Real> Tensor<T> {
    /// Build a tensor from a flat row-major buffer. All dimensions must be
    /// positive and the buffer length must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor".into() });
        }
        Ok(Tensor {
            id: fresh_id(),
            shape: shape.into(),
            data: Arc::new(RwLock::new(data)),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); numel]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// A single-element tensor, shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar is finite")
    }

    /// Mark this tensor as a leaf that accumulates gradients.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Whether this tensor participates in gradient computation (either a
    /// leaf parameter or derived from one under a recording tape).
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_tracked(&mut self, tracked: bool) {
        self.requires_grad = tracked;
    }

    /// Read access to the flat data.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.data.read().expect("tensor lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    /// Overwrite the data in place (same length). Every handle sees the new
    /// values; this is how optimizer steps reach the model.
    pub fn assign(&self, values: &[T]) {
        let mut guard = self.data.write().expect("tensor lock poisoned");
        assert_eq!(guard.len(), values.len(), "assign length mismatch");
        guard.copy_from_slice(values);
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Interpret the shape as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a 4-d NCHW tensor, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Gradients keyed by tensor id, produced by [`Tape::backward`].
pub struct GradStore<T> {
    grads: HashMap<TensorId, Vec<T>>,
}

impl<T: Real> GradStore<T> {
    fn new() -> Self {
        GradStore { grads: HashMap::new() }
    }

    /// Add a contribution for `id`, allocating zeros on first touch.
    /// Contributions sum, so a tensor feeding several ops accumulates.
    pub fn accumulate(&mut self, id: TensorId, contribution: &[T]) {
        let slot = self
            .grads
            .entry(id)
            .or_insert_with(|| vec![T::zero(); contribution.len()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, c) in slot.iter_mut().zip(contribution) {
            *s += *c;
        }
    }

    /// Mutable access to the gradient buffer for `id`, zero-initialized to
    /// `numel` on first touch. Lets backward kernels accumulate in place.
    pub fn buffer_mut(&mut self, id: TensorId, numel: usize) -> &mut [T] {
        self.grads.entry(id).or_insert_with(|| vec![T::zero(); numel])
    }

    pub fn get(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&tensor.id()).map(|v| v.as_slice())
    }

    pub fn by_id(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    /// Gradient of `tensor`, or zeros when no recorded path reached it.
    pub fn grad_or_zeros(&self, tensor: &Tensor<T>) -> Vec<T> {
        match self.get(tensor) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tensor.numel()],
        }
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradStore<T>)>;

struct TapeEntry<T> {
    output: TensorId,
    backward: BackwardFn<T>,
}

/// Ordered record of the forward pass. Ops push entries in execution order,
/// so inputs of every entry precede it; the reverse sweep visits each entry
/// exactly once.
pub struct Tape<T> {
    enabled: bool,
    entries: Vec<TapeEntry<T>>,
}

impl<T: Real> Tape<T> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Tape { enabled: true, entries: Vec::new() }
    }

    /// A non-recording tape for inference/evaluation.
    pub fn no_grad() -> Self {
        Tape { enabled: false, entries: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Record a backward rule for `output`. The closure receives the
    /// upstream gradient of `output` and accumulates into its inputs.
    pub fn record(&mut self, output: &Tensor<T>, backward: impl Fn(&[T], &mut GradStore<T>) + 'static) {
        if self.enabled {
            self.entries.push(TapeEntry { output: output.id(), backward: Box::new(backward) });
        }
    }

    /// Reverse sweep from a scalar loss. Tensors with no recorded path to
    /// the loss simply receive no gradient (query with
    /// [`GradStore::grad_or_zeros`]).
    pub fn backward(&self, loss: &Tensor<T>) -> Result<GradStore<T>> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: loss.numel() });
        }
        let mut store = GradStore::new();
        store.accumulate(loss.id(), &[T::one()]);
        for entry in self.entries.iter().rev() {
            let upstream = match store.by_id(entry.output) {
                Some(g) => g.to_vec(),
                None => continue,
            };
            (entry.backward)(&upstream, &mut store);
        }
        Ok(store)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "unhelpful message: {msg}");
    }

    #[test]
    fn from_vec_rejects_zero_dim() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn assign_is_visible_through_clones() {
        let t = Tensor::<f32>::zeros(&[3]);
        let view = t.clone();
        t.assign(&[1.0, 2.0, 3.0]);
        assert_eq!(view.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f32>::new();
        let not_scalar = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(&not_scalar), Err(Error::NonScalarLoss { numel: 2 })));
    }

    #[test]
    fn backward_with_no_path_gives_zero_grads() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let loss = Tensor::scalar(5.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.grad_or_zeros(&x), vec![0.0, 0.0]);
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn loss_grad_wrt_itself_is_one() {
        let tape = Tape::<f64>::new();
        let loss = Tensor::scalar(3.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&loss).unwrap(), &[1.0]);
    }
}
