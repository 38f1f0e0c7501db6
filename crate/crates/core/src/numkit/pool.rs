//! Per-thread free list for large gradient buffers. Training allocates the
//! same few parameter-sized buffers on every step; recycling them keeps the
//! allocator from handing pages back to the OS and faulting them in again.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};

/// Smaller buffers go straight to the allocator.
const MIN_LEN: usize = 1 << 12;
const MAX_POOLED: usize = 64;

thread_local! {
    static FREE: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A zero-filled vector of length `n`.
pub(crate) fn zeroed(n: usize) -> Vec<f64> {
    if n < MIN_LEN {
        return vec![0.0; n];
    }
    let reused = FREE.with(|f| {
        let mut f = f.borrow_mut();
        let best = f
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= n)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i)?;
        Some(f.swap_remove(best))
    });
    match reused {
        Some(mut v) => {
            v.clear();
            v.resize(n, 0.0);
            v
        }
        None => vec![0.0; n],
    }
}

pub(crate) fn recycle(v: Vec<f64>) {
    if v.capacity() >= MIN_LEN {
        FREE.with(|f| {
            let mut f = f.borrow_mut();
            if f.len() < MAX_POOLED {
                f.push(v);
            }
        });
    }
}

/// Gradient buffer that returns to the pool when dropped.
#[derive(Debug, Default, PartialEq)]
pub struct GradVec(Vec<f64>);

impl GradVec {
    pub(crate) fn new(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl Deref for GradVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for GradVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Drop for GradVec {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.0));
    }
}
