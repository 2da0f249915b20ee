//! Differentiable operations.
//!
//! Every op validates shapes up front and installs a backward closure on
//! the tape. Accumulations run in fixed index order; parallel loops only
//! split across independent output rows.

use rayon::prelude::*;

use super::tensor::{real, Scalar, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds the parallel split costs more than it buys.
const PAR_THRESHOLD: usize = 1 << 15;

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Dot product with eight independent accumulator lanes. Fixed summation
/// order (lane-major), so results stay bit-reproducible run to run; the
/// lanes break the add dependency chain and let the loop vectorize.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [S::zero(); LANES];
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let done = (a.len() / LANES) * LANES;
    let mut tail = S::zero();
    for i in done..a.len() {
        tail = tail + a[i] * b[i];
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    acc[0] + tail
}

fn check_same_dims<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("{op}: dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_dims(a, b, "add")?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |ctx| {
            ctx.parents[0].accum_grad(ctx.out_grad);
            ctx.parents[1].accum_grad(ctx.out_grad);
        },
    ))
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_dims(a, b, "sub")?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |ctx| {
            ctx.parents[0].accum_grad(ctx.out_grad);
            ctx.parents[1].grad_mut(|g| {
                for (gi, &d) in g.iter_mut().zip(ctx.out_grad) {
                    *gi = *gi - d;
                }
            });
        },
    ))
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_dims(a, b, "mul")?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let bd = b.shared_data();
            a.grad_mut(|g| {
                for i in 0..g.len() {
                    g[i] = g[i] + ctx.out_grad[i] * bd[i];
                }
            });
            let ad = a.shared_data();
            b.grad_mut(|g| {
                for i in 0..g.len() {
                    g[i] = g[i] + ctx.out_grad[i] * ad[i];
                }
            });
        },
    ))
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(a.dims().to_vec(), data, vec![a.clone()], move |ctx| {
        ctx.parents[0].grad_mut(|g| {
            for (gi, &d) in g.iter_mut().zip(ctx.out_grad) {
                *gi = *gi + d * c;
            }
        });
    })
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x
        .data()
        .iter()
        .map(|&v| {
            let sig = S::one() / (S::one() + (-v).exp());
            v * sig
        })
        .collect();
    Tensor::from_op(x.dims().to_vec(), data, vec![x.clone()], |ctx| {
        let xd = ctx.parents[0].shared_data();
        ctx.parents[0].grad_mut(|g| {
            for i in 0..g.len() {
                let v = xd[i];
                let sig = S::one() / (S::one() + (-v).exp());
                let d = sig * (S::one() + v * (S::one() - sig));
                g[i] = g[i] + ctx.out_grad[i] * d;
            }
        });
    })
}

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let total: S = x.data().iter().copied().sum();
    Tensor::from_op(vec![1], vec![total], vec![x.clone()], |ctx| {
        let d = ctx.out_grad[0];
        ctx.parents[0].grad_mut(|g| {
            for gi in g.iter_mut() {
                *gi = *gi + d;
            }
        });
    })
}

/// Same flat data, new dims. Shares the buffer.
pub fn reshape<S: Scalar>(x: &Tensor<S>, dims: Vec<usize>) -> Result<Tensor<S>> {
    let n: usize = dims.iter().product();
    if n != x.len() {
        return Err(shape_err(format!("reshape: {:?} -> {:?}", x.dims(), dims)));
    }
    Ok(Tensor::from_op_shared(dims, x.shared_data(), vec![x.clone()], |ctx| {
        ctx.parents[0].accum_grad(ctx.out_grad);
    }))
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// out[i,:] += a[i,:] . b  (b row-major [k,n]); i-k-j loop order.
fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
}

/// out[i,kk] += a[i,:] . b[kk,:]  (i.e. a . b^T with b row-major [k,n] -> out [m,k]).
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let body = |i: usize, orow: &mut [S]| {
        let arow = &a[i * n..(i + 1) * n];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            *o = *o + dot(arow, brow);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(k).enumerate() {
            body(i, orow);
        }
    }
}

/// out[kk,:] += sum_i a[i,kk] * b[i,:]  (a^T . b with a [m,k], b [m,n] -> out [k,n]).
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    let body = |kk: usize, orow: &mut [S]| {
        for i in 0..m {
            let av = a[i * k + kk];
            let brow = &b[i * n..i * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, orow)| body(kk, orow));
    } else {
        for (kk, orow) in out.chunks_mut(n).enumerate() {
            body(kk, orow);
        }
    }
}

/// Matrix product. Accepts [m,k]x[k,n], batched [b,m,k]x[b,k,n], and
/// [b,m,k]x[k,n] with a shared right-hand side.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, m, k) = match a.dims() {
        [m, k] => (1usize, *m, *k),
        [bt, m, k] => (*bt, *m, *k),
        d => return Err(shape_err(format!("matmul lhs rank {:?}", d))),
    };
    let (b_batched, k2, n) = match b.dims() {
        [k2, n] => (false, *k2, *n),
        [bt2, k2, n] => {
            if a.dims().len() != 3 || *bt2 != batch {
                return Err(shape_err(format!(
                    "matmul batch mismatch: lhs {:?}, rhs {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            (true, *k2, *n)
        }
        d => return Err(shape_err(format!("matmul rhs rank {:?}", d))),
    };
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dims: lhs {:?} (k={k}) vs rhs {:?} (k={k2})",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![S::zero(); batch * m * n];
    for bt in 0..batch {
        let asl = &a.data()[bt * m * k..(bt + 1) * m * k];
        let bsl = if b_batched {
            &b.data()[bt * k * n..(bt + 1) * k * n]
        } else {
            b.data()
        };
        mm(asl, bsl, m, k, n, &mut out[bt * m * n..(bt + 1) * m * n]);
    }
    let out_dims = if a.dims().len() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok(Tensor::from_op(
        out_dims,
        out,
        vec![a.clone(), b.clone()],
        move |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let (ad, bd) = (a.shared_data(), b.shared_data());
            a.grad_mut(|ga| {
                for bt in 0..batch {
                    let dc = &ctx.out_grad[bt * m * n..(bt + 1) * m * n];
                    let bsl = if b_batched {
                        &bd[bt * k * n..(bt + 1) * k * n]
                    } else {
                        &bd[..]
                    };
                    mm_nt(dc, bsl, m, n, k, &mut ga[bt * m * k..(bt + 1) * m * k]);
                }
            });
            b.grad_mut(|gb| {
                for bt in 0..batch {
                    let dc = &ctx.out_grad[bt * m * n..(bt + 1) * m * n];
                    let asl = &ad[bt * m * k..(bt + 1) * m * k];
                    let gsl = if b_batched {
                        &mut gb[bt * k * n..(bt + 1) * k * n]
                    } else {
                        &mut gb[..]
                    };
                    mm_tn(asl, dc, m, k, n, gsl);
                }
            });
        },
    ))
}

// ---------------------------------------------------------------------------
// broadcasts
// ---------------------------------------------------------------------------

/// x [.., n] + bias [n], broadcast over all leading dims.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let n = *x.dims().last().ok_or_else(|| shape_err("add_bias: rank 0".into()))?;
    if bias.dims() != [n] {
        return Err(shape_err(format!(
            "add_bias: x last dim {n}, bias {:?}",
            bias.dims()
        )));
    }
    let bd = bias.data();
    let data: Vec<S> = x
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
        .collect();
    Ok(Tensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        move |ctx| {
            ctx.parents[0].accum_grad(ctx.out_grad);
            ctx.parents[1].grad_mut(|g| {
                for row in ctx.out_grad.chunks(n) {
                    for (gi, &d) in g.iter_mut().zip(row) {
                        *gi = *gi + d;
                    }
                }
            });
        },
    ))
}

/// Repeat a [n]-vector (or [1,n]) into [rows, n].
pub fn broadcast_rows<S: Scalar>(v: &Tensor<S>, rows: usize) -> Result<Tensor<S>> {
    let n = v.len();
    if !(v.dims().len() == 1 || (v.dims().len() == 2 && v.dims()[0] == 1)) {
        return Err(shape_err(format!("broadcast_rows: source dims {:?}", v.dims())));
    }
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_op(vec![rows, n], data, vec![v.clone()], move |ctx| {
        ctx.parents[0].grad_mut(|g| {
            for row in ctx.out_grad.chunks(n) {
                for (gi, &d) in g.iter_mut().zip(row) {
                    *gi = *gi + d;
                }
            }
        });
    }))
}

/// x [f, c, h, w] + bias [f, c]: per-frame per-channel shift (timestep
/// conditioning of ResNet blocks).
pub fn add_channel_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let [f, c, h, w] = *x.dims() else {
        return Err(shape_err(format!("add_channel_bias: x dims {:?}", x.dims())));
    };
    if bias.dims() != [f, c] {
        return Err(shape_err(format!(
            "add_channel_bias: x {:?}, bias {:?}",
            x.dims(),
            bias.dims()
        )));
    }
    let plane = h * w;
    let bd = bias.data();
    let mut data = x.data().to_vec();
    for fc in 0..f * c {
        let b = bd[fc];
        for v in &mut data[fc * plane..(fc + 1) * plane] {
            *v = *v + b;
        }
    }
    Ok(Tensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        move |ctx| {
            ctx.parents[0].accum_grad(ctx.out_grad);
            ctx.parents[1].grad_mut(|g| {
                for fc in 0..f * c {
                    let mut acc = S::zero();
                    for &d in &ctx.out_grad[fc * plane..(fc + 1) * plane] {
                        acc = acc + d;
                    }
                    g[fc] = g[fc] + acc;
                }
            });
        },
    ))
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Normalize each row of [rows, m] to zero mean / unit variance (no affine).
pub fn row_norm<S: Scalar>(x: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(shape_err(format!("row_norm: dims {:?}", dims)));
    }
    let m = *dims.last().unwrap();
    let rows = x.len() / m;
    let eps = real::<S>(eps);
    let inv_m = S::one() / real::<S>(m as f64);
    let mut data = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); rows];
    for r in 0..rows {
        let xin = &x.data()[r * m..(r + 1) * m];
        let mut mean = S::zero();
        for &v in xin {
            mean = mean + v;
        }
        mean = mean * inv_m;
        let mut var = S::zero();
        for &v in xin {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_m;
        let istd = S::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for (o, &v) in data[r * m..(r + 1) * m].iter_mut().zip(xin) {
            *o = (v - mean) * istd;
        }
    }
    Ok(Tensor::from_op(dims.to_vec(), data, vec![x.clone()], move |ctx| {
        // dx = istd * (dy - mean(dy) - y * mean(dy * y))
        ctx.parents[0].grad_mut(|g| {
            for r in 0..rows {
                let y = &ctx.out_data[r * m..(r + 1) * m];
                let dy = &ctx.out_grad[r * m..(r + 1) * m];
                let mut mean_dy = S::zero();
                let mut mean_dyy = S::zero();
                for j in 0..m {
                    mean_dy = mean_dy + dy[j];
                    mean_dyy = mean_dyy + dy[j] * y[j];
                }
                mean_dy = mean_dy * inv_m;
                mean_dyy = mean_dyy * inv_m;
                let istd = inv_std[r];
                let gr = &mut g[r * m..(r + 1) * m];
                for j in 0..m {
                    gr[j] = gr[j] + istd * (dy[j] - mean_dy - y[j] * mean_dyy);
                }
            }
        });
    }))
}

/// y = g (.) x + b with g, b of the last-dim length, broadcast over rows.
/// Combined with `row_norm` this is LayerNorm.
pub fn scale_shift_rows<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let m = *x.dims().last().ok_or_else(|| shape_err("scale_shift_rows: rank 0".into()))?;
    if gamma.dims() != [m] || beta.dims() != [m] {
        return Err(shape_err(format!(
            "scale_shift_rows: x last dim {m}, gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let gd = gamma.data();
    let bd = beta.data();
    let data: Vec<S> = x
        .data()
        .chunks(m)
        .flat_map(|row| row.iter().enumerate().map(|(j, &v)| gd[j] * v + bd[j]))
        .collect();
    Ok(Tensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let xd = ctx.parents[0].shared_data();
            let gd = ctx.parents[1].shared_data();
            ctx.parents[0].grad_mut(|g| {
                for (row, (gr, dy)) in g.chunks_mut(m).zip(ctx.out_grad.chunks(m)).enumerate() {
                    let _ = row;
                    for j in 0..m {
                        gr[j] = gr[j] + dy[j] * gd[j];
                    }
                }
            });
            ctx.parents[1].grad_mut(|g| {
                for (r, dy) in ctx.out_grad.chunks(m).enumerate() {
                    let xr = &xd[r * m..(r + 1) * m];
                    for j in 0..m {
                        g[j] = g[j] + dy[j] * xr[j];
                    }
                }
            });
            ctx.parents[2].grad_mut(|g| {
                for dy in ctx.out_grad.chunks(m) {
                    for j in 0..m {
                        g[j] = g[j] + dy[j];
                    }
                }
            });
        },
    ))
}

/// Per-channel affine for [f, c, h, w] maps (GroupNorm's learnable part).
pub fn channel_affine<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [f, c, h, w] = *x.dims() else {
        return Err(shape_err(format!("channel_affine: x dims {:?}", x.dims())));
    };
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err(format!(
            "channel_affine: channels {c}, gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let plane = h * w;
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = x.data().to_vec();
    for fi in 0..f {
        for ci in 0..c {
            let (g, b) = (gd[ci], bd[ci]);
            let o = (fi * c + ci) * plane;
            for v in &mut data[o..o + plane] {
                *v = g * *v + b;
            }
        }
    }
    Ok(Tensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let xd = ctx.parents[0].shared_data();
            let gd = ctx.parents[1].shared_data();
            ctx.parents[0].grad_mut(|g| {
                for fi in 0..f {
                    for ci in 0..c {
                        let o = (fi * c + ci) * plane;
                        let gc = gd[ci];
                        for j in o..o + plane {
                            g[j] = g[j] + ctx.out_grad[j] * gc;
                        }
                    }
                }
            });
            ctx.parents[1].grad_mut(|g| {
                for fi in 0..f {
                    for ci in 0..c {
                        let o = (fi * c + ci) * plane;
                        let mut acc = S::zero();
                        for j in o..o + plane {
                            acc = acc + ctx.out_grad[j] * xd[j];
                        }
                        g[ci] = g[ci] + acc;
                    }
                }
            });
            ctx.parents[2].grad_mut(|g| {
                for fi in 0..f {
                    for ci in 0..c {
                        let o = (fi * c + ci) * plane;
                        let mut acc = S::zero();
                        for j in o..o + plane {
                            acc = acc + ctx.out_grad[j];
                        }
                        g[ci] = g[ci] + acc;
                    }
                }
            });
        },
    ))
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis with an optional additive mask (0 allowed,
/// <= -1e8 blocked). Blocked positions come out exactly 0; max-subtraction
/// and the normalizing sum only see unmasked entries, so masked inputs
/// cannot perturb unmasked outputs even in the last bit.
pub fn softmax<S: Scalar>(x: &Tensor<S>, mask: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let m = *x.dims().last().ok_or_else(|| shape_err("softmax: rank 0".into()))?;
    if let Some(mk) = mask {
        if mk.dims() != x.dims() {
            return Err(shape_err(format!(
                "softmax mask dims {:?} vs input {:?}",
                mk.dims(),
                x.dims()
            )));
        }
    }
    let blocked_at = real::<S>(-1e8);
    let rows = x.len() / m;
    let mut data = vec![S::zero(); x.len()];
    for r in 0..rows {
        let xin = &x.data()[r * m..(r + 1) * m];
        let mrow = mask.map(|mk| &mk.data()[r * m..(r + 1) * m]);
        let allowed = |j: usize| mrow.map_or(true, |mr| mr[j] > blocked_at);
        let mut mx: Option<S> = None;
        for (j, &v) in xin.iter().enumerate() {
            if allowed(j) {
                mx = Some(match mx {
                    Some(cur) if cur >= v => cur,
                    _ => v,
                });
            }
        }
        let mx = mx.ok_or_else(|| {
            Error::Numeric(format!("softmax: row {r} has no unmasked entries"))
        })?;
        if !mx.is_finite() {
            return Err(Error::Numeric(format!("softmax: non-finite input in row {r}")));
        }
        let out = &mut data[r * m..(r + 1) * m];
        let mut sum = S::zero();
        for (j, &v) in xin.iter().enumerate() {
            if allowed(j) {
                let e = (v - mx).exp();
                out[j] = e;
                sum = sum + e;
            }
        }
        let inv = S::one() / sum;
        for (j, o) in out.iter_mut().enumerate() {
            if allowed(j) {
                *o = *o * inv;
            }
        }
    }
    Ok(Tensor::from_op(x.dims().to_vec(), data, vec![x.clone()], move |ctx| {
        // dx = y (.) (dy - sum(dy (.) y)); masked slots have y = 0
        ctx.parents[0].grad_mut(|g| {
            for r in 0..rows {
                let y = &ctx.out_data[r * m..(r + 1) * m];
                let dy = &ctx.out_grad[r * m..(r + 1) * m];
                let mut dot = S::zero();
                for j in 0..m {
                    dot = dot + y[j] * dy[j];
                }
                let gr = &mut g[r * m..(r + 1) * m];
                for j in 0..m {
                    gr[j] = gr[j] + y[j] * (dy[j] - dot);
                }
            }
        });
    }))
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

/// [f, c, h, w] -> [f, h*w, c] token layout for attention.
pub fn nchw_to_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [f, c, h, w] = *x.dims() else {
        return Err(shape_err(format!("nchw_to_tokens: dims {:?}", x.dims())));
    };
    let s = h * w;
    let xd = x.data();
    let mut data = vec![S::zero(); x.len()];
    for fi in 0..f {
        for ci in 0..c {
            let src = (fi * c + ci) * s;
            for si in 0..s {
                data[(fi * s + si) * c + ci] = xd[src + si];
            }
        }
    }
    Ok(Tensor::from_op(vec![f, s, c], data, vec![x.clone()], move |ctx| {
        ctx.parents[0].grad_mut(|g| {
            for fi in 0..f {
                for ci in 0..c {
                    let dst = (fi * c + ci) * s;
                    for si in 0..s {
                        g[dst + si] = g[dst + si] + ctx.out_grad[(fi * s + si) * c + ci];
                    }
                }
            }
        });
    }))
}

/// [f, h*w, c] -> [f, c, h, w]; inverse of `nchw_to_tokens`.
pub fn tokens_to_nchw<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let [f, s, c] = *x.dims() else {
        return Err(shape_err(format!("tokens_to_nchw: dims {:?}", x.dims())));
    };
    if s != h * w {
        return Err(shape_err(format!("tokens_to_nchw: s={s} vs {h}x{w}")));
    }
    let xd = x.data();
    let mut data = vec![S::zero(); x.len()];
    for fi in 0..f {
        for ci in 0..c {
            let dst = (fi * c + ci) * s;
            for si in 0..s {
                data[dst + si] = xd[(fi * s + si) * c + ci];
            }
        }
    }
    Ok(Tensor::from_op(vec![f, c, h, w], data, vec![x.clone()], move |ctx| {
        ctx.parents[0].grad_mut(|g| {
            for fi in 0..f {
                for ci in 0..c {
                    let src = (fi * c + ci) * s;
                    for si in 0..s {
                        let gi = (fi * s + si) * c + ci;
                        g[gi] = g[gi] + ctx.out_grad[src + si];
                    }
                }
            }
        });
    }))
}

/// Concatenate along the channel axis of [f, c, h, w] maps (U-Net skips).
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let [fa, ca, ha, wa] = *a.dims() else {
        return Err(shape_err(format!("concat_channels: lhs dims {:?}", a.dims())));
    };
    let [fb, cb, hb, wb] = *b.dims() else {
        return Err(shape_err(format!("concat_channels: rhs dims {:?}", b.dims())));
    };
    if (fa, ha, wa) != (fb, hb, wb) {
        return Err(shape_err(format!(
            "concat_channels: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for fi in 0..fa {
        data.extend_from_slice(&a.data()[fi * ca * plane..(fi + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[fi * cb * plane..(fi + 1) * cb * plane]);
    }
    Ok(Tensor::from_op(
        vec![fa, ca + cb, ha, wa],
        data,
        vec![a.clone(), b.clone()],
        move |ctx| {
            let stride = (ca + cb) * plane;
            ctx.parents[0].grad_mut(|g| {
                for fi in 0..fa {
                    let src = &ctx.out_grad[fi * stride..fi * stride + ca * plane];
                    let dst = &mut g[fi * ca * plane..(fi + 1) * ca * plane];
                    for (gi, &d) in dst.iter_mut().zip(src) {
                        *gi = *gi + d;
                    }
                }
            });
            ctx.parents[1].grad_mut(|g| {
                for fi in 0..fa {
                    let src = &ctx.out_grad[fi * stride + ca * plane..(fi + 1) * stride];
                    let dst = &mut g[fi * cb * plane..(fi + 1) * cb * plane];
                    for (gi, &d) in dst.iter_mut().zip(src) {
                        *gi = *gi + d;
                    }
                }
            });
        },
    ))
}

/// Embedding lookup: rows of `table` [v, d] selected by `ids`.
pub fn gather_rows<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let [v, d] = *table.dims() else {
        return Err(shape_err(format!("gather_rows: table dims {:?}", table.dims())));
    };
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(shape_err(format!("gather_rows: id {id} out of range {v}")));
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let ids = ids.to_vec();
    Ok(Tensor::from_op(
        vec![ids.len(), d],
        data,
        vec![table.clone()],
        move |ctx| {
            ctx.parents[0].grad_mut(|g| {
                for (row, &id) in ids.iter().enumerate() {
                    let src = &ctx.out_grad[row * d..(row + 1) * d];
                    let dst = &mut g[id * d..(id + 1) * d];
                    for (gi, &s) in dst.iter_mut().zip(src) {
                        *gi = *gi + s;
                    }
                }
            });
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_product() {
        let a = Tensor::<f32>::from_vec(vec![1, 1], vec![2.0]);
        let b = Tensor::from_vec(vec![1, 1], vec![3.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("k=3") && err.contains("k=4"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // gradient of sum(a.b) w.r.t. a equals ones(m,n) . b^T; verify the
        // closed form and central differences (h = 1e-3, f64) agree.
        let mut rng = crate::rng::Rng::new(5);
        let (m, k, n) = (4, 5, 3);
        let adata: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let bdata: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let a = Tensor::<f64>::leaf(vec![m, k], adata.clone());
        let b = Tensor::<f64>::from_vec(vec![k, n], bdata.clone());
        let loss = sum_all(&matmul(&a, &b).unwrap());
        loss.backward();
        let grad = a.grad().unwrap();
        let h = 1e-3;
        for i in 0..m * k {
            let mut plus = adata.clone();
            plus[i] += h;
            let mut minus = adata.clone();
            minus[i] -= h;
            let f = |data: Vec<f64>| {
                let at = Tensor::<f64>::from_vec(vec![m, k], data);
                let bt = Tensor::<f64>::from_vec(vec![k, n], bdata.clone());
                sum_all(&matmul(&at, &bt).unwrap()).item()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8, "idx {i}: {} vs {fd}", grad[i]);
            // closed form: row sums of b^T columns
            let closed: f64 = (0..n).map(|j| bdata[(i % k) * n + j]).sum();
            assert!((grad[i] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let mut rng = crate::rng::Rng::new(9);
        let (bt, m, k, n) = (3, 2, 4, 5);
        let a: Vec<f32> = (0..bt * m * k).map(|_| rng.normal() as f32).collect();
        let b: Vec<f32> = (0..bt * k * n).map(|_| rng.normal() as f32).collect();
        let full = matmul(
            &Tensor::from_vec(vec![bt, m, k], a.clone()),
            &Tensor::from_vec(vec![bt, k, n], b.clone()),
        )
        .unwrap();
        for bi in 0..bt {
            let one = matmul(
                &Tensor::from_vec(vec![m, k], a[bi * m * k..(bi + 1) * m * k].to_vec()),
                &Tensor::from_vec(vec![k, n], b[bi * k * n..(bi + 1) * k * n].to_vec()),
            )
            .unwrap();
            assert_eq!(&full.data()[bi * m * n..(bi + 1) * m * n], one.data());
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::<f32>::from_vec(vec![1, 2], vec![0.0, 0.0]);
        let y = softmax(&x, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow() {
        let x = Tensor::<f32>::from_vec(vec![1, 2], vec![1000.0, 0.0]);
        let y = softmax(&x, None).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_masked_uniform() {
        let x = Tensor::<f32>::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let m = Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, -1e9]);
        let y = softmax(&x, Some(&m)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let x = Tensor::<f32>::from_vec(vec![1, 2], vec![0.0, 0.0]);
        let m = Tensor::from_vec(vec![1, 2], vec![-1e9, -1e9]);
        assert!(softmax(&x, Some(&m)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(2);
        let x: Vec<f32> = (0..60).map(|_| (rng.normal() * 3.0) as f32).collect();
        let y = softmax(&Tensor::from_vec(vec![6, 10], x), None).unwrap();
        for row in y.data().chunks(10) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn masked_input_cannot_shift_unmasked_output_bits() {
        let mask = Tensor::from_vec(vec![1, 4], vec![0.0, 0.0, -1e9, -1e9]);
        let base = vec![0.3f32, -1.2, 5.0, 0.0];
        let y1 = softmax(&Tensor::from_vec(vec![1, 4], base.clone()), Some(&mask)).unwrap();
        let mut perturbed = base;
        perturbed[2] = -77.0;
        perturbed[3] = 1234.0;
        let y2 = softmax(&Tensor::from_vec(vec![1, 4], perturbed), Some(&mask)).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

/// Concatenate tensors along axis 0. All parts must agree on trailing
/// dims; gradient splits back per part.
pub fn stack_rows<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(shape_err("stack_rows: no parts".into()));
    }
    let tail = &parts[0].dims()[1..];
    let mut rows = 0usize;
    for p in parts {
        if &p.dims()[1..] != tail {
            return Err(shape_err(format!(
                "stack_rows: trailing dims {:?} vs {:?}",
                &p.dims()[1..],
                tail
            )));
        }
        rows += p.dims()[0];
    }
    let mut dims = vec![rows];
    dims.extend_from_slice(tail);
    let mut data = Vec::with_capacity(dims.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    Ok(Tensor::from_op(dims, data, parts.to_vec(), move |ctx| {
        let mut offset = 0;
        for (i, &sz) in sizes.iter().enumerate() {
            let grad = &ctx.out_grad[offset..offset + sz];
            ctx.parents[i].accum_grad(grad);
            offset += sz;
        }
    }))
}
