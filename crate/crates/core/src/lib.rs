//! Two-stage seq2seq modeling: latent multiset tagging followed by
//! differentiable permutation inference.
//!
//! Stage one predicts, per input token, a multiset of output tokens, trained
//! by the exact marginal likelihood of the gold multiset. Stage two orders
//! the predicted tokens by solving an entropy-regularized linear program over
//! relaxed permutations with cyclic KL projections, rounds with the Hungarian
//! algorithm, and trains through the unrolled solver.

pub mod config;
pub mod data;
pub mod encoder;
pub mod ibm1;
pub mod multiset;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod posterior;
pub mod reporting;
pub mod rounding;
pub mod scores;
pub mod solver;
pub mod tensor;
pub mod vocab;

pub use rounding::Permutation;
pub use scores::ScoreBundle;
pub use solver::{SoftPermutation, SolverConfig};
pub use tensor::tape::{Bcast, Tape, Var};
pub use tensor::{Tensor, TensorError, NEG_LOG};
pub use vocab::Vocab;
