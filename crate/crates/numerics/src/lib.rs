//! Numeric substrate for the pixel-constrained CNN.
//!
//! Everything the networks need lives here: a dense row-major [`Tensor`],
//! tap-masked 2-D cross-correlation, a tape-based reverse-mode
//! differentiation [`Graph`], weighted softmax cross-entropy over discrete
//! levels, and the [`Adam`] optimizer.
//!
//! All of it is generic over [`Element`], implemented for `f32` (training and
//! inference) and `f64` (gradient checking against finite differences).

pub mod adam;
pub mod conv;
mod element;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d, ConvGeometry, TapMask};
pub use element::Element;
pub use error::{NumericsError, Result};
pub use graph::{Gradients, Graph, Var};
pub use loss::{log_softmax, softmax_cross_entropy};
pub use tensor::Tensor;
