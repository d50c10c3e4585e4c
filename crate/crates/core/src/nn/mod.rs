//! Hand-written layers with forward and backward passes, the patch
//! classifier built from them, and its checkpoint format.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod model;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use batchnorm::{BatchNorm, BatchNormConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model};
pub use conv::Conv2d;
pub use dense::Dense;
pub use loss::{bce_loss, BCE_CLAMP};
pub use model::{Architecture, ForwardCache, Gradients, Layer, MlpOrder, Model};
pub use scalar::Scalar;
pub use tensor::Tensor;
