//! Learning sparse networks with trainable binary gates.
//!
//! Every gated layer pairs its weight tensor with a same-shape tensor of gate
//! values in `[0, 1]`. Forward passes use `W ⊙ mask` where the mask is drawn
//! from the gates, either by thresholding at 0.5 or by bernoulli sampling.
//! Gradients reach the gates through a straight-through estimator. After
//! training, the masks are frozen and pruned into compressed sparse rows for
//! export and inference.

mod binio;
pub mod data;
pub mod gates;
pub mod infer;
pub mod model;
pub mod regularizers;
pub mod sparsify;
pub mod tensor;
pub mod trainer;
