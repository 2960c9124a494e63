//! Numeric core: tensors, differentiable kernels, a reverse-mode tape,
//! parameter storage, the RMSProp optimizer, and checkpoint I/O.
//!
//! All arithmetic is `f64`. Gradients come from recording operations on a
//! [`Tape`] and replaying them backwards; there is no graph compilation and
//! no implicit broadcasting. Each kernel exists in a sequential and (behind
//! the `parallel` feature) a rayon variant that produce bit-identical
//! output.

pub mod checkpoint;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::RmsProp;
pub use params::{glorot_uniform, ParamSet, Parameter};
pub use tape::{Tape, Value};
pub use tensor::Tensor;
