//! Ultrasound B-mode deconvolution.
//!
//! The crate recovers a continuous echogenicity map from a log-compressed
//! B-mode image. A hash-grid neural field is rendered through a separable
//! point spread function and a log-compression stage, and fitted to the
//! observed image by gradient descent. A Richardson-Lucy baseline, a
//! synthetic phantom generator and evaluation tools are included.

// `!(x > 0.0)` is the idiom used throughout for rejecting NaN with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod image;
pub mod inr;
pub mod io;
pub mod optim;
pub mod phantom;
pub mod psf;
pub mod render;
pub mod rl;
pub mod tensorgraph;

pub use error::{Error, Result};
pub use image::Image2D;

/// Keeps large training buffers on the heap between iterations.
///
/// glibc hands allocations above its mmap threshold straight to the kernel
/// and zero-fills fresh pages on every reuse; a training step allocates
/// dozens of such buffers. Raising the threshold and disabling trimming
/// lets them recycle. No-op on other allocators.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters and is called before
    // any worker threads exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
