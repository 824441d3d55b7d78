//! Minimal dense real-tensor engine with reverse-mode gradients.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, rel_err, GradCheckReport};
pub use tape::{normal_cdf, normal_pdf, Gradients, NodeId, Tape};
pub use tensor::{matmul_raw, Tensor};
