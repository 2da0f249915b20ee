//! Minimal reverse-mode differentiable array engine.
//!
//! Provides exactly the operations the denoising networks need: matmul,
//! masked attention, 1x3x3 frame-local convolution, normalization layers,
//! SiLU, embedding lookups and the broadcast/reshape plumbing between them.
//! Training and sampling run in f32; gradient checks instantiate the same
//! generic code with f64.
//!
//! Tensors are immutable once produced. Gradients accumulate through a
//! tape of backward closures; reductions run in a fixed index order so
//! results are bit-reproducible run to run.

mod attention;
mod conv;
mod gradcheck;
mod ops;
mod optim;
mod store;
mod tensor;

pub use attention::{attention_weights, masked_attention, AttendMask, CausalAttend, FullAttend, RowSpan};
pub use conv::{conv_1x3x3, upsample_nearest_2x};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    add, add_bias, add_channel_bias, broadcast_rows, channel_affine, concat_channels, gather_rows,
    matmul, mul, nchw_to_tokens, reshape, row_norm, scale, scale_shift_rows, silu, softmax,
    stack_rows, sub, sum_all, tokens_to_nchw,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use store::{digest_params, ParamStore, Parameter};
pub use tensor::{no_grad, real, BackwardCtx, Scalar, Tensor};
