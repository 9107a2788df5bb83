//! Dense row-major f64 tensors with optional gradient buffers.
//!
//! Values are cheap reference-counted handles; the autodiff tape in
//! [`tape`] holds clones of whatever it needs for the backward pass, so
//! intermediates not kept by a tape are freed as soon as the last handle
//! drops. Compute precision is f64 throughout; f32 appears only at the
//! checkpoint serialization boundary.

pub mod kernels;
pub mod tape;

pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{MirError, Result};

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

fn track_alloc(bytes: usize) {
    let now = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(now, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes of tensor data currently alive in the process.
pub fn live_tensor_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak_tensor_bytes`].
pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    grad_enabled: Cell<bool>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        let mut bytes = self.data.borrow().len() * 8;
        if self.grad.borrow().is_some() {
            bytes += bytes;
        }
        track_free(bytes);
    }
}

/// Dense N-dimensional f64 array, row-major, shared by handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        track_alloc(data.len() * 8);
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                grad_enabled: Cell::new(false),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.shape.is_empty()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, loading).
    /// Mutating a tensor that is referenced by a live tape invalidates
    /// that tape's gradients; callers only do this between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Copy with the same data, detached from gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec())
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled.get()
    }

    pub fn set_grad_enabled(&self, enabled: bool) {
        self.inner.grad_enabled.set(enabled);
    }

    pub fn with_grad(self) -> Tensor {
        self.set_grad_enabled(true);
        self
    }

    /// Accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (gv, dv) in buf.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => {
                track_alloc(delta.len() * 8);
                *g = Some(delta.to_vec());
            }
        }
    }

    /// Stable identity for tape bookkeeping.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MirError::Numeric(format!("non-finite values in {context}")))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.inner
            .data
            .borrow()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Elementwise max abs difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let a = self.data();
        let b = other.data();
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.data.borrow();
        if d.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.inner.shape, &d[..])
        } else {
            write!(
                f,
                "Tensor{:?} [{:.4}, {:.4}, ...; {} values]",
                self.inner.shape,
                d[0],
                d[1],
                d.len()
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn memory_accounting_tracks_drops() {
        // other tests allocate concurrently, so compare against a tensor
        // large enough to dwarf their churn
        let big = 1 << 23;
        let before = live_tensor_bytes() as i64;
        let t = Tensor::zeros(&[big]);
        let with_t = live_tensor_bytes() as i64;
        assert!(with_t - before >= (big * 8) as i64 - (1 << 20));
        drop(t);
        let after = live_tensor_bytes() as i64;
        assert!((after - before).abs() < (1 << 20));
    }
}
