//! Exactly invertible latent codec.
//!
//! Space-to-depth: every p x p pixel block of an RGB frame becomes 3p^2
//! channels at a single latent site, after an affine map from [0,1] pixels
//! to [-1,1]. The inverse reverses both steps. For pixels on the 1/256
//! grid (which the renderer and all dataset files use) the affine map is
//! exact in f32, so encode -> decode round-trips bit-for-bit; that makes
//! reference-frame preservation testable as equality rather than tolerance.

use crate::error::{Error, Result};

/// Geometry of the pixel <-> latent mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    /// Patch side in pixels.
    pub patch: usize,
    /// Square frame side in pixels.
    pub image_side: usize,
}

impl LatentSpec {
    pub fn new(patch: usize, image_side: usize) -> Result<Self> {
        if patch == 0 || image_side == 0 || image_side % patch != 0 {
            return Err(Error::Config(format!(
                "latent spec: image side {image_side} not divisible by patch {patch}"
            )));
        }
        Ok(LatentSpec { patch, image_side })
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.patch
    }

    /// 3 * p^2 latent channels.
    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn spatial_tokens(&self) -> usize {
        self.latent_side() * self.latent_side()
    }
}

/// Encode one RGB frame [3, H, W] (values in [0,1]) into a latent
/// [c, H/p, W/p]. Latent channel index is ch * p^2 + dy * p + dx, so the
/// three RGB planes stay grouped.
pub fn encode(frame: &[f32], spec: &LatentSpec) -> Result<Vec<f32>> {
    let side = spec.image_side;
    if frame.len() != 3 * side * side {
        return Err(Error::Shape(format!(
            "encode: frame has {} values, expected 3x{side}x{side} = {}",
            frame.len(),
            3 * side * side
        )));
    }
    let p = spec.patch;
    let ls = spec.latent_side();
    let c = spec.channels();
    let mut latent = vec![0f32; c * ls * ls];
    for ch in 0..3 {
        for ly in 0..ls {
            for lx in 0..ls {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = frame[ch * side * side + (ly * p + dy) * side + (lx * p + dx)];
                        let lc = ch * p * p + dy * p + dx;
                        latent[lc * ls * ls + ly * ls + lx] = 2.0 * pix - 1.0;
                    }
                }
            }
        }
    }
    Ok(latent)
}

/// Exact inverse of [`encode`]; output clamped to [0,1] (a no-op for
/// latents produced by `encode` from in-range frames).
pub fn decode(latent: &[f32], spec: &LatentSpec) -> Result<Vec<f32>> {
    let ls = spec.latent_side();
    let c = spec.channels();
    if latent.len() != c * ls * ls {
        return Err(Error::Shape(format!(
            "decode: latent has {} values, expected {}x{ls}x{ls} = {} (channels = 3p^2 = {c})",
            latent.len(),
            c,
            c * ls * ls
        )));
    }
    let p = spec.patch;
    let side = spec.image_side;
    let mut frame = vec![0f32; 3 * side * side];
    for ch in 0..3 {
        for ly in 0..ls {
            for lx in 0..ls {
                for dy in 0..p {
                    for dx in 0..p {
                        let lc = ch * p * p + dy * p + dx;
                        let v = latent[lc * ls * ls + ly * ls + lx];
                        frame[ch * side * side + (ly * p + dy) * side + (lx * p + dx)] =
                            ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(frame)
}

/// Encode all frames of a clip ([n, 3, H, W] -> [n, c, h, w]).
pub fn encode_clip(frames: &[f32], n: usize, spec: &LatentSpec) -> Result<Vec<f32>> {
    let fsz = 3 * spec.image_side * spec.image_side;
    if frames.len() != n * fsz {
        return Err(Error::Shape(format!(
            "encode_clip: {} values for {n} frames of {fsz}",
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(n * spec.channels() * spec.spatial_tokens());
    for f in 0..n {
        out.extend(encode(&frames[f * fsz..(f + 1) * fsz], spec)?);
    }
    Ok(out)
}

/// Decode all frames ([n, c, h, w] -> [n, 3, H, W]).
pub fn decode_clip(latents: &[f32], n: usize, spec: &LatentSpec) -> Result<Vec<f32>> {
    let lsz = spec.channels() * spec.spatial_tokens();
    if latents.len() != n * lsz {
        return Err(Error::Shape(format!(
            "decode_clip: {} values for {n} latents of {lsz}",
            latents.len()
        )));
    }
    let mut out = Vec::with_capacity(n * 3 * spec.image_side * spec.image_side);
    for f in 0..n {
        out.extend(decode(&latents[f * lsz..(f + 1) * lsz], spec)?);
    }
    Ok(out)
}
