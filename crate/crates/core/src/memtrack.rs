//! Process-wide accounting of live network activation bytes.
//!
//! Only tensors owned by a network evaluation (saved layer inputs, tap maps,
//! backward gradients) are counted. Images, gradients of the full image and
//! cached content tiles are not activations and are not counted.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Real, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn charge(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::SeqCst) + bytes;
    PEAK.fetch_max(now, Ordering::SeqCst);
}

fn release(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::SeqCst);
}

/// Live activation bytes right now.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::SeqCst)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::SeqCst)
}

pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::SeqCst), Ordering::SeqCst);
}

/// A tensor whose bytes are counted while it is alive.
#[derive(Debug)]
pub struct Tracked<T: Real> {
    tensor: Tensor<T>,
    bytes: usize,
}

impl<T: Real> Tracked<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        let bytes = tensor.nbytes();
        charge(bytes);
        Tracked { tensor, bytes }
    }

    pub fn into_inner(mut self) -> Tensor<T> {
        release(self.bytes);
        self.bytes = 0;
        std::mem::replace(&mut self.tensor, Tensor::zeros(&[0]))
    }
}

impl<T: Real> Drop for Tracked<T> {
    fn drop(&mut self) {
        release(self.bytes);
    }
}

impl<T: Real> Deref for Tracked<T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        &self.tensor
    }
}

impl<T: Real> DerefMut for Tracked<T> {
    fn deref_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }
}
