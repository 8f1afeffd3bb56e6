//! Composite generative adversarial networks.
//!
//! Several generators each emit an RGBA layer; the layers are alpha blended in
//! sequence into one opaque image which a single discriminator judges. A
//! recurrent conditioner ties the generators' inputs together, an optional
//! bank of variational encoders maps real images back to the noise sequence,
//! and an optional alpha-budget loss keeps any one generator from claiming the
//! whole canvas.

pub mod autograd;
pub mod compositor;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use error::{CganError, Result};
pub use tensor::Tensor;
