//! Length-informed group advantages for RL rollouts and adaptive layer-wise
//! merging of task vectors.
//!
//! - [`lipo`]: GRPO and length-informed advantage estimation.
//! - [`reward`]: exact-match and edit-distance rewards, `\boxed{}` extraction.
//! - [`sim`]: a tabular clipped-surrogate simulator for comparing the two.
//! - [`merge`]: Task Arithmetic, WUDI, and adaptive merging of checkpoints.
//! - [`checkpoint`]: the tensor container and task-vector extraction.
//! - [`tensor`]: the dense matrix type used by the merge math.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod lipo;
pub mod merge;
pub mod par;
pub mod reward;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use par::Schedule;
pub use tensor::Matrix;
