//! A deterministic toy-transformer lab.
//!
//! Everything runs in fixed-order f64 arithmetic, so generation, sequential
//! prefill, and parallel prefill produce bit-identical activations and
//! caches. On top of the engine sit instrumentation (residual and
//! attention-stream traces), a persona-direction toolkit (extraction,
//! steering, capping, bias folding), persona-space analysis, and an
//! experiment harness with planted ground-truth models.

pub mod error;
pub mod hooks;
pub mod kvcache;
pub mod model;
pub mod numcore;
pub mod persona;
pub mod space;
pub mod trace;
pub mod transcript;

pub use error::{Error, Result};
