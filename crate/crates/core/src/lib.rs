//! Representation learning with Discrete Fourier Transform regression
//! targets.
//!
//! An encoder is pretrained to predict a real-valued view (real part,
//! imaginary part, magnitude, phase, or a concatenation) of the DFT of its
//! input image, computed over the width axis, the image plane, or all three
//! axes. The learned embedding is then scored by training a linear
//! classifier on top of the frozen encoder.

pub mod checkpoint;
pub mod data;
pub mod dft;
pub mod error;
pub mod exec;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
