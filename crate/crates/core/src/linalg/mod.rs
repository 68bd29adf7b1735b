//! Dense real tensors with a reverse-mode tape, plus the small complex
//! linear algebra the quantum side needs.

pub mod complex;
pub mod tape;
pub mod tensor;

pub use complex::{ComplexMatrix, HermitianEig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
