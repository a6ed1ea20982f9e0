//! Minimal dense-tensor kernel: row-major `f64` matrices, a gradient tape
//! with the handful of primitives the imputer needs, MLP stacks and Adam.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use mlp::{Activation, Linear, MlpParams};
pub use params::{decode_params, encode_params, load_params, GradSet, NamedTensor, Parameters};
pub use tape::{GradTape, Var};
pub use tensor::Tensor2;
