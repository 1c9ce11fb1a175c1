//! Minimal sequential-MLP substrate with hand-written backpropagation.
//!
//! Everything here is `f64` and row-major: a batch is an `[n × d]` matrix,
//! dense weights are stored `[d_in × d_out]` so a layer computes `x·W + b`.

mod adam;
mod gaussian;
mod io;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use gaussian::{
    gaussian_head_backward, split_gaussian_head, GaussianBatch, GaussianParams, LOG_VARIANCE_MAX,
    LOG_VARIANCE_MIN, VARIANCE_FLOOR,
};
pub use io::{MlpDocument, NamedArray};
pub use mlp::{
    Activation, BatchNormParams, BatchNormSpec, LayerParams, LayerSpec, Mlp, MlpParams, MlpSpec,
    Mode, Tape, BATCHNORM_EPS, BATCHNORM_MOMENTUM,
};
pub(crate) use mlp::sigmoid;
