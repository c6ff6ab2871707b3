//! Dense arrays, small networks, 3×3 SVD and the Adam optimizer.

pub mod adam;
pub mod dense;
pub mod mlp;
pub mod quat;
pub mod svd;

pub use adam::{adam_step, AdamState};
pub use dense::DenseArray;
pub use mlp::{sigmoid, softplus, Activation, Layer, Mlp, MlpTape};
pub use svd::{svd3, Svd3};
