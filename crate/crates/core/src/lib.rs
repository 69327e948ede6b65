//! Multimodal speaker-naming engine.
//!
//! Trains a convolutional face classifier from scratch, fuses it with MFCC
//! utterance statistics into a single face-audio network, rejects non-matched
//! face-audio pairs with linear margin classifiers, and names the speaker in
//! each speaking frame.

pub mod audio;
pub mod error;
pub mod io;
pub mod models;
pub mod naming;
pub mod nn;
pub mod parallel;
pub mod reject;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
