//! Frame-local convolution: temporal kernel extent is exactly 1, so each
//! frame is convolved independently and the frame axis behaves as a batch.
//!
//! Planes are zero-padded into scratch buffers before the kernel loops so
//! the inner loops run over contiguous slices without bounds checks.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Kernel layout accepted by [`conv_1x3x3`]: rank-4 `[co, ci, kh, kw]`
/// (the 2D form) or rank-5 `[co, ci, 1, kh, kw]` (the inflated 3D form).
/// Both index the same flat data, so an inflated kernel convolves
/// bit-identically to its 2D source.
fn kernel_geometry(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [co, ci, kh, kw] => Ok((co, ci, kh, kw)),
        [co, ci, 1, kh, kw] => Ok((co, ci, kh, kw)),
        _ => Err(Error::Shape(format!("conv kernel dims {:?}", dims))),
    }
}

/// Copy one [h, w] plane into a zero-padded [h + 2p, w + 2p] buffer.
fn pad_plane<S: Scalar>(src: &[S], h: usize, w: usize, pad: usize, dst: &mut [S]) {
    let pw = w + 2 * pad;
    dst.fill(S::zero());
    for y in 0..h {
        let drow = (y + pad) * pw + pad;
        dst[drow..drow + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// Same-padded conv over [f, ci, h, w] with an odd square kernel (1x1 or
/// 3x3) and stride 1 or 2. Output at frame i depends only on input frame i.
pub fn conv_1x3x3<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    let [f, ci, h, wd] = *x.dims() else {
        return Err(Error::Shape(format!("conv input dims {:?}", x.dims())));
    };
    let (co, ci_k, kh, kw) = kernel_geometry(w.dims())?;
    if ci != ci_k {
        return Err(Error::Shape(format!(
            "conv channels: input {ci} vs kernel {ci_k} (kernel {:?})",
            w.dims()
        )));
    }
    if b.dims() != [co] {
        return Err(Error::Shape(format!("conv bias dims {:?}, expected [{co}]", b.dims())));
    }
    if kh != kw || !(kh == 1 || kh == 3) || !(stride == 1 || stride == 2) {
        return Err(Error::Shape(format!("conv kernel {kh}x{kw} stride {stride} unsupported")));
    }
    let pad = kh / 2;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let xd: &[S] = x.data();
    let wdat: &[S] = w.data();
    let bd: &[S] = b.data();
    let in_plane = h * wd;
    let out_plane = oh * ow;

    let taps = ci * kh * kw;
    let mut out = vec![S::zero(); f * co * out_plane];
    // im2col: rows are (ci, dy, dx) taps, columns the output sites; the
    // conv becomes one [co, taps] x [taps, out_plane] product per frame
    let build_cols = |fi: usize, padded: &mut [S], cols: &mut [S]| {
        for ci_i in 0..ci {
            pad_plane(
                &xd[(fi * ci + ci_i) * in_plane..][..in_plane],
                h,
                wd,
                pad,
                &mut padded[ci_i * ph * pw..(ci_i + 1) * ph * pw],
            );
        }
        for ci_i in 0..ci {
            let iplane = &padded[ci_i * ph * pw..(ci_i + 1) * ph * pw];
            for dy in 0..kh {
                for dx in 0..kw {
                    let crow =
                        &mut cols[((ci_i * kh + dy) * kw + dx) * out_plane..][..out_plane];
                    for oy in 0..oh {
                        let irow = &iplane[(oy * stride + dy) * pw + dx..];
                        let dst = &mut crow[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            dst.copy_from_slice(&irow[..ow]);
                        } else {
                            for (ox, o) in dst.iter_mut().enumerate() {
                                *o = irow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    };
    let per_frame = |fi: usize, frame_out: &mut [S]| {
        let mut padded = vec![S::zero(); ci * ph * pw];
        let mut cols = vec![S::zero(); taps * out_plane];
        build_cols(fi, &mut padded, &mut cols);
        for co_i in 0..co {
            let oplane = &mut frame_out[co_i * out_plane..(co_i + 1) * out_plane];
            oplane.fill(bd[co_i]);
            let wrow = &wdat[co_i * taps..(co_i + 1) * taps];
            for (tap, &kv) in wrow.iter().enumerate() {
                let crow = &cols[tap * out_plane..(tap + 1) * out_plane];
                for (o, &cv) in oplane.iter_mut().zip(crow) {
                    *o = *o + kv * cv;
                }
            }
        }
    };
    if f * co * ci * out_plane * kh * kw >= 1 << 15 {
        out.par_chunks_mut(co * out_plane)
            .enumerate()
            .for_each(|(fi, fo)| per_frame(fi, fo));
    } else {
        for (fi, fo) in out.chunks_mut(co * out_plane).enumerate() {
            per_frame(fi, fo);
        }
    }

    Ok(Tensor::from_op(
        vec![f, co, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |ctx| {
            let xd: &[S] = ctx.parents[0].data();
            let wdat: &[S] = ctx.parents[1].data();
            let dout = ctx.out_grad;
            // d/d input: accumulate into a padded buffer, then crop. The
            // padded scatter keeps the inner loops contiguous.
            ctx.parents[0].grad_mut(|gx| {
                let taps = ci * kh * kw;
                let frames: Vec<(usize, &mut [S])> =
                    gx.chunks_mut(ci * in_plane).enumerate().collect();
                let body = |fi: usize, gframe: &mut [S]| {
                    // dCol[tap][:] = sum_co w[co][tap] * dOut[co][:]
                    let mut dcols = vec![S::zero(); taps * out_plane];
                    let dframe = &dout[fi * co * out_plane..(fi + 1) * co * out_plane];
                    for co_i in 0..co {
                        let dplane = &dframe[co_i * out_plane..(co_i + 1) * out_plane];
                        let wrow = &wdat[co_i * taps..(co_i + 1) * taps];
                        for (tap, &kv) in wrow.iter().enumerate() {
                            let crow = &mut dcols[tap * out_plane..(tap + 1) * out_plane];
                            for (c, &d) in crow.iter_mut().zip(dplane) {
                                *c = *c + kv * d;
                            }
                        }
                    }
                    // col2im: scatter taps back through the padding
                    let mut gpad = vec![S::zero(); ci * ph * pw];
                    for ci_i in 0..ci {
                        let gplane = &mut gpad[ci_i * ph * pw..(ci_i + 1) * ph * pw];
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let crow = &dcols
                                    [((ci_i * kh + dy) * kw + dx) * out_plane..][..out_plane];
                                for oy in 0..oh {
                                    let grow = &mut gplane[(oy * stride + dy) * pw + dx..];
                                    let drow = &crow[oy * ow..(oy + 1) * ow];
                                    if stride == 1 {
                                        for (g, &d) in grow[..ow].iter_mut().zip(drow) {
                                            *g = *g + d;
                                        }
                                    } else {
                                        for (ox, &d) in drow.iter().enumerate() {
                                            grow[ox * stride] = grow[ox * stride] + d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for ci_i in 0..ci {
                        let gplane = &gpad[ci_i * ph * pw..(ci_i + 1) * ph * pw];
                        let gout = &mut gframe[ci_i * in_plane..(ci_i + 1) * in_plane];
                        for y in 0..h {
                            let prow = &gplane[(y + pad) * pw + pad..][..wd];
                            let orow = &mut gout[y * wd..(y + 1) * wd];
                            for (o, &p) in orow.iter_mut().zip(prow) {
                                *o = *o + p;
                            }
                        }
                    }
                };
                if f * co * ci * out_plane * kh * kw >= 1 << 15 {
                    frames.into_par_iter().for_each(|(fi, gframe)| body(fi, gframe));
                } else {
                    for (fi, gframe) in frames {
                        body(fi, gframe);
                    }
                }
            });
            // d/d kernel
            ctx.parents[1].grad_mut(|gw| {
                let body = |idx: usize, gk: &mut [S]| {
                    let co_i = idx / ci;
                    let ci_i = idx % ci;
                    let mut padded = vec![S::zero(); ph * pw];
                    for fi in 0..f {
                        pad_plane(
                            &xd[(fi * ci + ci_i) * in_plane..][..in_plane],
                            h,
                            wd,
                            pad,
                            &mut padded,
                        );
                        let dplane = &dout[(fi * co + co_i) * out_plane..][..out_plane];
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let mut acc = S::zero();
                                for oy in 0..oh {
                                    let irow = &padded[(oy * stride + dy) * pw + dx..];
                                    let drow = &dplane[oy * ow..(oy + 1) * ow];
                                    if stride == 1 {
                                        acc = acc + super::ops::dot(&irow[..ow], drow);
                                    } else {
                                        for (ox, &d) in drow.iter().enumerate() {
                                            acc = acc + irow[ox * stride] * d;
                                        }
                                    }
                                }
                                gk[dy * kw + dx] = gk[dy * kw + dx] + acc;
                            }
                        }
                    }
                };
                let chunks: Vec<(usize, &mut [S])> = gw.chunks_mut(kh * kw).enumerate().collect();
                if f * co * ci * out_plane * kh * kw >= 1 << 15 {
                    chunks.into_par_iter().for_each(|(idx, gk)| body(idx, gk));
                } else {
                    for (idx, gk) in chunks {
                        body(idx, gk);
                    }
                }
            });
            // d/d bias
            ctx.parents[2].grad_mut(|gb| {
                for fi in 0..f {
                    for co_i in 0..co {
                        let dplane = &dout[(fi * co + co_i) * out_plane..][..out_plane];
                        let mut acc = S::zero();
                        for &d in dplane {
                            acc = acc + d;
                        }
                        gb[co_i] = gb[co_i] + acc;
                    }
                }
            });
        },
    ))
}

/// Nearest-neighbor 2x spatial upsampling of [f, c, h, w].
pub fn upsample_nearest_2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [f, c, h, w] = *x.dims() else {
        return Err(Error::Shape(format!("upsample input dims {:?}", x.dims())));
    };
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![S::zero(); f * c * oh * ow];
    for p in 0..f * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                dst[y * ow + x_] = src[(y / 2) * w + x_ / 2];
            }
        }
    }
    Ok(Tensor::from_op(vec![f, c, oh, ow], out, vec![x.clone()], move |ctx| {
        ctx.parents[0].grad_mut(|g| {
            for p in 0..f * c {
                let dsrc = &ctx.out_grad[p * oh * ow..(p + 1) * oh * ow];
                let gdst = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for x_ in 0..ow {
                        let gi = (y / 2) * w + x_ / 2;
                        gdst[gi] = gdst[gi] + dsrc[y * ow + x_];
                    }
                }
            }
        });
    }))
}
#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::sum_all;
    use crate::rng::Rng;

    fn randn(n: usize, rng: &mut Rng) -> Vec<f32> {
        (0..n).map(|_| rng.normal() as f32).collect()
    }

    /// Plain 2D same-padded conv over a single [ci, h, w] frame; the
    /// independent reference the 3D op must reproduce frame by frame.
    fn conv2d_reference(
        x: &[f32],
        w: &[f32],
        b: &[f32],
        ci: usize,
        co: usize,
        h: usize,
        wd: usize,
    ) -> Vec<f32> {
        let mut out = vec![0f32; co * h * wd];
        for oc in 0..co {
            for y in 0..h {
                for x_ in 0..wd {
                    let mut acc = b[oc] as f64;
                    for ic in 0..ci {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let iy = y as isize + dy as isize - 1;
                                let ix = x_ as isize + dx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += (w[((oc * ci + ic) * 3 + dy) * 3 + dx]
                                    * x[(ic * h + iy as usize) * wd + ix as usize])
                                    as f64;
                            }
                        }
                    }
                    out[(oc * h + y) * wd + x_] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(vec![1, 1, 5, 5], randn(25, &mut rng));
        let mut k = vec![0f32; 9];
        k[4] = 1.0; // center tap
        let w = Tensor::from_vec(vec![1, 1, 3, 3], k);
        let b = Tensor::zeros(vec![1]);
        let y = conv_1x3x3(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn temporal_extent_one_isolates_frames() {
        let mut rng = Rng::new(2);
        let base = randn(2 * 3 * 4 * 4, &mut rng);
        let w = Tensor::from_vec(vec![2, 3, 1, 3, 3], randn(2 * 3 * 9, &mut rng));
        let b = Tensor::from_vec(vec![2], randn(2, &mut rng));
        let x1 = Tensor::from_vec(vec![2, 3, 4, 4], base.clone());
        let y1 = conv_1x3x3(&x1, &w, &b, 1).unwrap();
        let mut perturbed = base;
        for v in &mut perturbed[3 * 16..] {
            *v += 5.0; // frame 1 only
        }
        let x2 = Tensor::from_vec(vec![2, 3, 4, 4], perturbed);
        let y2 = conv_1x3x3(&x2, &w, &b, 1).unwrap();
        let frame0 = 2 * 16;
        for i in 0..frame0 {
            assert_eq!(y1.data()[i].to_bits(), y2.data()[i].to_bits(), "frame 0 changed at {i}");
        }
        assert_ne!(y1.data()[frame0..], y2.data()[frame0..]);
    }

    #[test]
    fn matches_frame_wise_2d_reference() {
        let mut rng = Rng::new(3);
        let (f, ci, co, h, wd) = (3, 4, 5, 6, 6);
        let scale = |v: Vec<f32>| v.into_iter().map(|x| 0.25 * x).collect::<Vec<_>>();
        let xdata = scale(randn(f * ci * h * wd, &mut rng));
        let wdata = scale(randn(co * ci * 9, &mut rng));
        let bdata = scale(randn(co, &mut rng));
        let x = Tensor::from_vec(vec![f, ci, h, wd], xdata.clone());
        // rank-5 inflated kernel shares flat data with the 2D slice
        let w = Tensor::from_vec(vec![co, ci, 1, 3, 3], wdata.clone());
        let b = Tensor::from_vec(vec![co], bdata.clone());
        let y = conv_1x3x3(&x, &w, &b, 1).unwrap();
        for fi in 0..f {
            let reference = conv2d_reference(
                &xdata[fi * ci * h * wd..(fi + 1) * ci * h * wd],
                &wdata,
                &bdata,
                ci,
                co,
                h,
                wd,
            );
            for (i, (&got, &want)) in y.data()[fi * co * h * wd..(fi + 1) * co * h * wd]
                .iter()
                .zip(&reference)
                .enumerate()
            {
                assert!((got - want).abs() <= 1e-6, "frame {fi} idx {i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![2, 5, 3, 3]);
        let b = Tensor::zeros(vec![2]);
        assert!(conv_1x3x3(&x, &w, &b, 1).is_err());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 8, 8]);
        let w = Tensor::zeros(vec![2, 2, 3, 3]);
        let b = Tensor::zeros(vec![2]);
        let y = conv_1x3x3(&x, &w, &b, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        let (f, ci, co, h, wd) = (2, 2, 3, 4, 4);
        let xdata: Vec<f64> = (0..f * ci * h * wd).map(|_| rng.normal()).collect();
        let wdata: Vec<f64> = (0..co * ci * 9).map(|_| rng.normal()).collect();
        let bdata: Vec<f64> = (0..co).map(|_| rng.normal()).collect();
        for stride in [1usize, 2] {
            let run = |xv: &[f64], wv: &[f64], bv: &[f64]| {
                let x = Tensor::from_vec(vec![f, ci, h, wd], xv.to_vec());
                let w = Tensor::from_vec(vec![co, ci, 3, 3], wv.to_vec());
                let b = Tensor::from_vec(vec![co], bv.to_vec());
                sum_all(&conv_1x3x3(&x, &w, &b, stride).unwrap()).item()
            };
            let x = Tensor::leaf(vec![f, ci, h, wd], xdata.clone());
            let w = Tensor::leaf(vec![co, ci, 3, 3], wdata.clone());
            let b = Tensor::leaf(vec![co], bdata.clone());
            let loss = sum_all(&conv_1x3x3(&x, &w, &b, stride).unwrap());
            loss.backward();
            let h_ = 1e-6;
            let gx = x.grad().unwrap();
            for i in (0..xdata.len()).step_by(7) {
                let mut p = xdata.clone();
                p[i] += h_;
                let mut m = xdata.clone();
                m[i] -= h_;
                let fd = (run(&p, &wdata, &bdata) - run(&m, &wdata, &bdata)) / (2.0 * h_);
                assert!((gx[i] - fd).abs() < 1e-6, "stride {stride} dx[{i}]: {} vs {fd}", gx[i]);
            }
            let gw = w.grad().unwrap();
            for i in (0..wdata.len()).step_by(5) {
                let mut p = wdata.clone();
                p[i] += h_;
                let mut m = wdata.clone();
                m[i] -= h_;
                let fd = (run(&xdata, &p, &bdata) - run(&xdata, &m, &bdata)) / (2.0 * h_);
                assert!((gw[i] - fd).abs() < 1e-6, "stride {stride} dw[{i}]: {} vs {fd}", gw[i]);
            }
            let gb = b.grad().unwrap();
            for i in 0..co {
                let mut p = bdata.clone();
                p[i] += h_;
                let mut m = bdata.clone();
                m[i] -= h_;
                let fd = (run(&xdata, &wdata, &p) - run(&xdata, &wdata, &m)) / (2.0 * h_);
                assert!((gb[i] - fd).abs() < 1e-6, "stride {stride} db[{i}]: {} vs {fd}", gb[i]);
            }
        }
    }

    #[test]
    fn upsample_round_trip_shape_and_grad() {
        let mut rng = Rng::new(5);
        let xdata: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.normal()).collect();
        let x = Tensor::leaf(vec![2, 2, 3, 3], xdata.clone());
        let y = upsample_nearest_2x(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 6, 6]);
        let loss = sum_all(&y);
        loss.backward();
        // each input cell feeds exactly four outputs
        for g in x.grad().unwrap() {
            assert_eq!(g, 4.0);
        }
    }
}
