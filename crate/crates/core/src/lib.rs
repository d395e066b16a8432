//! Temporal dynamic convolution (TDY-CNN) for text-independent speaker
//! verification, together with the feature frontend, training loop,
//! verification metrics and phoneme-level attention analysis around it.

pub mod audio;
pub mod dynconv;
pub mod error;
pub mod eval;
pub mod model;
pub mod phoneme;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
