//! Dense double-precision tensors with a tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every differentiable operation as it executes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every leaf created with [`Graph::leaf`]. All forward ops
//! reject non-finite results, so a NaN surfaces at the op that produced it.

mod check;
mod error;
mod graph;
mod kernels;
mod tensor;

pub use check::{compare_gradients, grad_check, numeric_gradient};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Stops glibc from handing freed tensor buffers back to the OS after
/// every graph. Training allocates and frees the same multi-megabyte
/// buffers each batch; with the default thresholds those round-trips
/// through mmap and page faults cost more than the arithmetic. Affects the
/// whole process; a no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tuning parameters.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
                libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TOP_PAD, 64 << 20);
            }
        });
    }
}

/// Standard normal CDF, exact erf form.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}
