//! Small building blocks shared by the text encoder, the instruction
//! decomposer and the U-Net: linear, layer norm, group norm, timestep
//! embeddings.

use crate::error::Result;
use crate::numerics::{
    add, add_bias, channel_affine, matmul, real, reshape, row_norm, scale_shift_rows, ParamStore,
    Scalar, Tensor,
};

/// x . w + b where x is [.., k], w is [k, n], b is [n].
pub(crate) fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    add_bias(&matmul(x, w)?, b)
}

pub(crate) fn linear_p<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    linear(x, &store.get(&format!("{prefix}.w"))?, &store.get(&format!("{prefix}.b"))?)
}

/// LayerNorm over the last axis with learned affine.
pub(crate) fn layer_norm<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let normed = row_norm(x, 1e-5)?;
    scale_shift_rows(
        &normed,
        &store.get(&format!("{prefix}.g"))?,
        &store.get(&format!("{prefix}.b"))?,
    )
}

/// GroupNorm over [f, c, h, w]: rows are (frame, group) slices, so frames
/// never mix; per-channel affine afterwards.
pub(crate) fn group_norm<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
    groups: usize,
) -> Result<Tensor<S>> {
    let [f, c, h, w] = *x.dims() else {
        return Err(crate::error::Error::Shape(format!("group_norm dims {:?}", x.dims())));
    };
    debug_assert_eq!(c % groups, 0);
    let grouped = reshape(x, vec![f * groups, (c / groups) * h * w])?;
    let normed = row_norm(&grouped, 1e-5)?;
    let back = reshape(&normed, vec![f, c, h, w])?;
    channel_affine(
        &back,
        &store.get(&format!("{prefix}.g"))?,
        &store.get(&format!("{prefix}.b"))?,
    )
}

/// Sinusoidal embedding of a diffusion step index, [dim] constant tensor.
pub(crate) fn sinusoidal_time<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        data[i] = real::<S>(arg.sin());
        data[half + i] = real::<S>(arg.cos());
    }
    Tensor::from_vec(vec![1, dim], data)
}

/// Residual add that tolerates identical dims only.
pub(crate) fn residual<S: Scalar>(x: &Tensor<S>, branch: &Tensor<S>) -> Result<Tensor<S>> {
    add(x, branch)
}
