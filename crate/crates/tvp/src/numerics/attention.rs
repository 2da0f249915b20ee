//! Fused multi-head attention with an arbitrary boolean mask.
//!
//! One kernel serves spatial self-attention, text cross-attention, the
//! text encoder's causal attention and all three temporal-attention
//! variants; only the mask differs. The score matrix is computed densely
//! for every mask (so the variants cost the same), but max-subtraction,
//! the exp and the normalizing sum touch unmasked entries only: blocked
//! weights are exactly +0.0 and blocked inputs cannot shift unmasked
//! outputs by even one bit. That property carries the causality suite.

use rayon::prelude::*;

use super::tensor::{real, Scalar, Tensor};
use crate::error::{Error, Result};

/// Allowed keys of one query row, as a strided index set. Lets the
/// softmax loops run without a per-element mask query.
#[derive(Clone, Copy, Debug)]
pub struct RowSpan {
    pub start: usize,
    pub step: usize,
    /// Exclusive upper bound.
    pub end: usize,
}

impl RowSpan {
    pub fn iter(&self) -> impl Iterator<Item = usize> {
        (self.start..self.end).step_by(self.step.max(1))
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Which (query, key) pairs may attend.
pub trait AttendMask: Sync {
    fn allows(&self, q: usize, k: usize) -> bool;

    /// Allowed keys of row `q` as a strided span. Must agree with
    /// `allows`; the default scans, implementations override with a
    /// closed form.
    fn row_span(&self, q: usize, tk: usize) -> RowSpan {
        let mut first = None;
        let mut last = 0;
        let mut second = None;
        for k in 0..tk {
            if self.allows(q, k) {
                if first.is_none() {
                    first = Some(k);
                } else if second.is_none() {
                    second = Some(k);
                }
                last = k;
            }
        }
        match first {
            None => RowSpan { start: 0, step: 1, end: 0 },
            Some(f) => {
                let step = second.map_or(1, |s| s - f);
                RowSpan { start: f, step, end: last + 1 }
            }
        }
    }
}

/// Everything attends to everything.
pub struct FullAttend;

impl AttendMask for FullAttend {
    #[inline]
    fn allows(&self, _q: usize, _k: usize) -> bool {
        true
    }

    fn row_span(&self, _q: usize, tk: usize) -> RowSpan {
        RowSpan { start: 0, step: 1, end: tk }
    }
}

/// Token-level causal mask: key index <= query index.
pub struct CausalAttend;

impl AttendMask for CausalAttend {
    #[inline]
    fn allows(&self, q: usize, k: usize) -> bool {
        k <= q
    }

    fn row_span(&self, q: usize, _tk: usize) -> RowSpan {
        RowSpan { start: 0, step: 1, end: q + 1 }
    }
}

struct HeadBuffers<S> {
    q: Vec<S>,  // [t, dh]
    kt: Vec<S>, // [dh, t]
    v: Vec<S>,  // [t, dh]
}

fn slice_head<S: Scalar>(
    src: &[S],
    t: usize,
    c: usize,
    head: usize,
    dh: usize,
    rows: &mut Vec<S>,
    cols: &mut Vec<S>,
) {
    rows.clear();
    cols.clear();
    rows.resize(t * dh, S::zero());
    cols.resize(t * dh, S::zero());
    for i in 0..t {
        let base = i * c + head * dh;
        for d in 0..dh {
            let v = src[base + d];
            rows[i * dh + d] = v;
            cols[d * t + i] = v;
        }
    }
}

/// Forward pass for one (batch, head) pair. Returns (out [tq, dh],
/// weights [tq, tk]); blocked weights are exactly zero.
///
/// The score matrix and the weighted sum run densely for every mask (the
/// variants cost the same); only max-subtraction, exp and the normalizing
/// sum restrict to the allowed span, so blocked inputs never perturb
/// unmasked outputs.
#[allow(clippy::too_many_arguments)]
fn attend_head<S: Scalar>(
    bufs: &HeadBuffers<S>,
    tq: usize,
    tk: usize,
    dh: usize,
    scale: S,
    mask: &dyn AttendMask,
    out: &mut [S],
    weights: &mut [S],
    row_stride: usize,
) -> Result<()> {
    let mut logits = vec![S::zero(); tk];
    for i in 0..tq {
        logits.fill(S::zero());
        let qrow = &bufs.q[i * dh..(i + 1) * dh];
        for (d, &qv) in qrow.iter().enumerate() {
            let krow = &bufs.kt[d * tk..(d + 1) * tk];
            for (l, &kv) in logits.iter_mut().zip(krow) {
                *l = *l + qv * kv;
            }
        }
        let span = mask.row_span(i, tk);
        if span.is_empty() {
            return Err(Error::Numeric(format!(
                "attention: query {i} has an all-blocked mask row"
            )));
        }
        let mut mx = logits[span.start] * scale;
        if span.step == 1 {
            for &l in &logits[span.start..span.end] {
                let v = l * scale;
                if v > mx {
                    mx = v;
                }
            }
        } else {
            for j in span.iter() {
                let v = logits[j] * scale;
                if v > mx {
                    mx = v;
                }
            }
        }
        // dense exponentials for every variant (cost parity between the
        // masks); blocked entries are zeroed before the sum, so their
        // values never reach an unmasked output
        let wrow = &mut weights[i * row_stride..i * row_stride + tk];
        for (w, &l) in wrow.iter_mut().zip(&logits) {
            *w = (l * scale - mx).exp();
        }
        let mut sum = S::zero();
        if span.step == 1 {
            wrow[..span.start].fill(S::zero());
            wrow[span.end..].fill(S::zero());
            for &w in &wrow[span.start..span.end] {
                sum = sum + w;
            }
        } else {
            for (j, w) in wrow.iter_mut().enumerate() {
                let member = j >= span.start
                    && j < span.end
                    && (j - span.start) % span.step == 0;
                if member {
                    sum = sum + *w;
                } else {
                    *w = S::zero();
                }
            }
        }
        let inv = S::one() / sum;
        for j in span.iter() {
            wrow[j] = wrow[j] * inv;
        }
        // weighted sum over v rows: dense axpy, identical cost per mask
        let orow = &mut out[i * dh..(i + 1) * dh];
        orow.fill(S::zero());
        for (j, &wj) in wrow.iter().enumerate() {
            let vrow = &bufs.v[j * dh..(j + 1) * dh];
            for (o, &vv) in orow.iter_mut().zip(vrow) {
                *o = *o + wj * vv;
            }
        }
    }
    Ok(())
}

/// Post-softmax attention weights for head 0 of batch 0, [tq, tk].
/// Diagnostic only (mask structure tests); not differentiable.
pub fn attention_weights<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    heads: usize,
    mask: &dyn AttendMask,
) -> Result<Vec<S>> {
    let [_, tq, c] = *q.dims() else {
        return Err(Error::Shape(format!("attention q dims {:?}", q.dims())));
    };
    let tk = k.dims()[1];
    let dh = c / heads;
    let scale = real::<S>(1.0 / (dh as f64).sqrt());
    let mut bufs = HeadBuffers { q: Vec::new(), kt: Vec::new(), v: Vec::new() };
    let mut tmp = Vec::new();
    slice_head(&q.data()[..tq * c], tq, c, 0, dh, &mut bufs.q, &mut tmp);
    slice_head(&k.data()[..tk * c], tk, c, 0, dh, &mut tmp.clone(), &mut bufs.kt);
    bufs.v = vec![S::zero(); tk * dh];
    let mut out = vec![S::zero(); tq * dh];
    let mut weights = vec![S::zero(); tq * tk];
    attend_head(&bufs, tq, tk, dh, scale, mask, &mut out, &mut weights, tk)?;
    Ok(weights)
}

/// Multi-head attention. `q` is [b, tq, c]; `k`, `v` are [b, tk, c].
/// Head splitting is over the channel axis; `c % heads == 0`.
pub fn masked_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    mask: &dyn AttendMask,
) -> Result<Tensor<S>> {
    let [b, tq, c] = *q.dims() else {
        return Err(Error::Shape(format!("attention q dims {:?}", q.dims())));
    };
    let [bk, tk, ck] = *k.dims() else {
        return Err(Error::Shape(format!("attention k dims {:?}", k.dims())));
    };
    if v.dims() != [bk, tk, ck] || bk != b || ck != c {
        return Err(Error::Shape(format!(
            "attention dims q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("attention: channels {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let scale = real::<S>(1.0 / (dh as f64).sqrt());

    // per-(batch, head) tasks in parallel; outputs scattered sequentially
    // so assembly stays deterministic. The weight matrices are saved only
    // when the tape is recording; inference reuses one row buffer.
    let track = super::tensor::grad_enabled()
        && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    let (qd, kd, vd): (&[S], &[S], &[S]) = (q.data(), k.data(), v.data());
    let run_head = |bh: usize, weights: &mut [S], row_stride: usize| -> Result<Vec<S>> {
        let (bi, hi) = (bh / heads, bh % heads);
        let mut bufs = HeadBuffers { q: Vec::new(), kt: Vec::new(), v: Vec::new() };
        let qslice = &qd[bi * tq * c..(bi + 1) * tq * c];
        let kslice = &kd[bi * tk * c..(bi + 1) * tk * c];
        let vslice = &vd[bi * tk * c..(bi + 1) * tk * c];
        let mut scratch_rows = Vec::new();
        let mut scratch_cols = Vec::new();
        slice_head(qslice, tq, c, hi, dh, &mut bufs.q, &mut scratch_cols);
        slice_head(kslice, tk, c, hi, dh, &mut scratch_rows, &mut bufs.kt);
        slice_head(vslice, tk, c, hi, dh, &mut bufs.v, &mut scratch_cols);
        let mut out = vec![S::zero(); tq * dh];
        attend_head(&bufs, tq, tk, dh, scale, mask, &mut out, weights, row_stride)?;
        Ok(out)
    };
    let (pieces, saved): (Vec<Vec<S>>, Vec<S>) = if track {
        let mut saved = vec![S::zero(); b * heads * tq * tk];
        let pieces: Result<Vec<Vec<S>>> = saved
            .par_chunks_mut(tq * tk)
            .enumerate()
            .map(|(bh, chunk)| run_head(bh, chunk, tk))
            .collect();
        (pieces?, saved)
    } else {
        let pieces: Result<Vec<Vec<S>>> = (0..b * heads)
            .into_par_iter()
            .map(|bh| {
                let mut row = vec![S::zero(); tk];
                run_head(bh, &mut row, 0)
            })
            .collect();
        (pieces?, Vec::new())
    };

    let mut out = vec![S::zero(); b * tq * c];
    for (bh, piece) in pieces.iter().enumerate() {
        let (bi, hi) = (bh / heads, bh % heads);
        for i in 0..tq {
            let dst = bi * tq * c + i * c + hi * dh;
            out[dst..dst + dh].copy_from_slice(&piece[i * dh..(i + 1) * dh]);
        }
    }
    Ok(Tensor::from_op(
        vec![b, tq, c],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        move |ctx| {
            let (qt, kt, vt) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let (qd, kd, vd): (&[S], &[S], &[S]) = (qt.data(), kt.data(), vt.data());
            let grads: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..b * heads)
                .into_par_iter()
                .map(|bh| {
                    let (bi, hi) = (bh / heads, bh % heads);
                    let w = &saved[bh * tq * tk..(bh + 1) * tq * tk];
                    // per-head views
                    let mut qh = vec![S::zero(); tq * dh];
                    let mut kh = vec![S::zero(); tk * dh];
                    let mut vh = vec![S::zero(); tk * dh];
                    let mut dout = vec![S::zero(); tq * dh];
                    for i in 0..tq {
                        let base = bi * tq * c + i * c + hi * dh;
                        qh[i * dh..(i + 1) * dh].copy_from_slice(&qd[base..base + dh]);
                        dout[i * dh..(i + 1) * dh]
                            .copy_from_slice(&ctx.out_grad[base..base + dh]);
                    }
                    for j in 0..tk {
                        let base = bi * tk * c + j * c + hi * dh;
                        kh[j * dh..(j + 1) * dh].copy_from_slice(&kd[base..base + dh]);
                        vh[j * dh..(j + 1) * dh].copy_from_slice(&vd[base..base + dh]);
                    }
                    let mut dq = vec![S::zero(); tq * dh];
                    let mut dk = vec![S::zero(); tk * dh];
                    let mut dv = vec![S::zero(); tk * dh];
                    let mut dw = vec![S::zero(); tk];
                    for i in 0..tq {
                        let wrow = &w[i * tk..(i + 1) * tk];
                        let drow = &dout[i * dh..(i + 1) * dh];
                        let mut dot_wdw = S::zero();
                        for (j, &wj) in wrow.iter().enumerate() {
                            if wj == S::zero() {
                                dw[j] = S::zero();
                                continue;
                            }
                            let vrow = &vh[j * dh..(j + 1) * dh];
                            let mut acc = S::zero();
                            for (&d, &vv) in drow.iter().zip(vrow) {
                                acc = acc + d * vv;
                            }
                            dw[j] = acc;
                            dot_wdw = dot_wdw + wj * acc;
                            // dv[j] += w * dout[i]
                            let dvrow = &mut dv[j * dh..(j + 1) * dh];
                            for (g, &d) in dvrow.iter_mut().zip(drow) {
                                *g = *g + wj * d;
                            }
                        }
                        let qrow = &qh[i * dh..(i + 1) * dh];
                        let dqrow = &mut dq[i * dh..(i + 1) * dh];
                        for (j, &wj) in wrow.iter().enumerate() {
                            if wj == S::zero() {
                                continue;
                            }
                            let dl = wj * (dw[j] - dot_wdw) * scale;
                            let krow = &kh[j * dh..(j + 1) * dh];
                            let dkrow = &mut dk[j * dh..(j + 1) * dh];
                            for ((dq_d, &k_d), (dk_d, &q_d)) in dqrow
                                .iter_mut()
                                .zip(krow)
                                .zip(dkrow.iter_mut().zip(qrow))
                            {
                                *dq_d = *dq_d + dl * k_d;
                                *dk_d = *dk_d + dl * q_d;
                            }
                        }
                    }
                    (dq, dk, dv)
                })
                .collect();
            qt.grad_mut(|g| {
                for (bh, (dq, _, _)) in grads.iter().enumerate() {
                    let (bi, hi) = (bh / heads, bh % heads);
                    for i in 0..tq {
                        let base = bi * tq * c + i * c + hi * dh;
                        for d in 0..dh {
                            g[base + d] = g[base + d] + dq[i * dh + d];
                        }
                    }
                }
            });
            kt.grad_mut(|g| {
                for (bh, (_, dk, _)) in grads.iter().enumerate() {
                    let (bi, hi) = (bh / heads, bh % heads);
                    for j in 0..tk {
                        let base = bi * tk * c + j * c + hi * dh;
                        for d in 0..dh {
                            g[base + d] = g[base + d] + dk[j * dh + d];
                        }
                    }
                }
            });
            vt.grad_mut(|g| {
                for (bh, (_, _, dv)) in grads.iter().enumerate() {
                    let (bi, hi) = (bh / heads, bh % heads);
                    for j in 0..tk {
                        let base = bi * tk * c + j * c + hi * dh;
                        for d in 0..dh {
                            g[base + d] = g[base + d] + dv[j * dh + d];
                        }
                    }
                }
            });
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::sum_all;
    use crate::rng::Rng;

    fn randn(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.normal() * 0.5).collect()
    }

    /// Dense softmax(QK^T/sqrt(dh))V per head in f64; the independent
    /// reference for the fused kernel.
    fn reference(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        b: usize,
        tq: usize,
        tk: usize,
        c: usize,
        heads: usize,
        mask: &dyn AttendMask,
    ) -> Vec<f64> {
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0f64; b * tq * c];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let mut logits = vec![f64::NEG_INFINITY; tk];
                    for j in 0..tk {
                        if !mask.allows(i, j) {
                            continue;
                        }
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += q[bi * tq * c + i * c + h * dh + d]
                                * k[bi * tk * c + j * c + h * dh + d];
                        }
                        logits[j] = acc * scale;
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut w: Vec<f64> =
                        logits.iter().map(|&l| if l.is_finite() { (l - mx).exp() } else { 0.0 }).collect();
                    let s: f64 = w.iter().sum();
                    for wi in &mut w {
                        *wi /= s;
                    }
                    for d in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..tk {
                            acc += w[j] * v[bi * tk * c + j * c + h * dh + d];
                        }
                        out[bi * tq * c + i * c + h * dh + d] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_reference_full_and_causal() {
        let mut rng = Rng::new(8);
        let (b, tq, tk, c, heads) = (2, 5, 5, 8, 2);
        let qd = randn(b * tq * c, &mut rng);
        let kd = randn(b * tk * c, &mut rng);
        let vd = randn(b * tk * c, &mut rng);
        let q = Tensor::from_vec(vec![b, tq, c], qd.clone());
        let k = Tensor::from_vec(vec![b, tk, c], kd.clone());
        let v = Tensor::from_vec(vec![b, tk, c], vd.clone());
        for mask in [&FullAttend as &dyn AttendMask, &CausalAttend] {
            let got = masked_attention(&q, &k, &v, heads, mask).unwrap();
            let want = reference(&qd, &kd, &vd, b, tq, tk, c, heads, mask);
            for (i, (&a, &w)) in got.data().iter().zip(&want).enumerate() {
                assert!((a - w).abs() < 1e-12, "idx {i}: {a} vs {w}");
            }
        }
    }

    #[test]
    fn cross_attention_shapes() {
        let mut rng = Rng::new(9);
        let (b, tq, tk, c) = (3, 6, 4, 8);
        let q = Tensor::from_vec(vec![b, tq, c], randn(b * tq * c, &mut rng));
        let k = Tensor::from_vec(vec![b, tk, c], randn(b * tk * c, &mut rng));
        let v = Tensor::from_vec(vec![b, tk, c], randn(b * tk * c, &mut rng));
        let y = masked_attention(&q, &k, &v, 2, &FullAttend).unwrap();
        assert_eq!(y.dims(), &[b, tq, c]);
    }

    #[test]
    fn heads_must_divide_channels() {
        let q = Tensor::<f32>::zeros(vec![1, 2, 6]);
        assert!(masked_attention(&q, &q, &q, 4, &FullAttend).is_err());
    }

    #[test]
    fn causal_blocks_future_bits() {
        // Perturb the last key/value token; outputs for queries that cannot
        // see it must be bit-identical.
        let mut rng = Rng::new(10);
        let (tq, c, heads) = (6, 8, 2);
        let qd: Vec<f32> = randn(tq * c, &mut rng).iter().map(|&x| x as f32).collect();
        let base: Vec<f32> = randn(tq * c, &mut rng).iter().map(|&x| x as f32).collect();
        let q = Tensor::from_vec(vec![1, tq, c], qd.clone());
        let kv1 = Tensor::from_vec(vec![1, tq, c], base.clone());
        let y1 = masked_attention(&q, &kv1, &kv1, heads, &CausalAttend).unwrap();
        let mut perturbed = base;
        for v in &mut perturbed[(tq - 1) * c..] {
            *v += 3.0;
        }
        let kv2 = Tensor::from_vec(vec![1, tq, c], perturbed);
        let y2 = masked_attention(&q, &kv2, &kv2, heads, &CausalAttend).unwrap();
        for i in 0..(tq - 1) * c {
            assert_eq!(y1.data()[i].to_bits(), y2.data()[i].to_bits(), "leak at {i}");
        }
        assert_ne!(
            y1.data()[(tq - 1) * c..],
            y2.data()[(tq - 1) * c..],
            "last query should see the change"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let (b, t, c, heads) = (1, 4, 6, 3);
        let qd = randn(b * t * c, &mut rng);
        let kd = randn(b * t * c, &mut rng);
        let vd = randn(b * t * c, &mut rng);
        let run = |qv: &[f64], kv: &[f64], vv: &[f64]| {
            let q = Tensor::from_vec(vec![b, t, c], qv.to_vec());
            let k = Tensor::from_vec(vec![b, t, c], kv.to_vec());
            let v = Tensor::from_vec(vec![b, t, c], vv.to_vec());
            // weight the outputs so gradients are not uniform
            let y = masked_attention(&q, &k, &v, heads, &CausalAttend).unwrap();
            let w: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.3).sin()).collect();
            let wt = Tensor::from_vec(y.dims().to_vec(), w);
            sum_all(&crate::numerics::ops::mul(&y, &wt).unwrap()).item()
        };
        let q = Tensor::leaf(vec![b, t, c], qd.clone());
        let k = Tensor::leaf(vec![b, t, c], kd.clone());
        let v = Tensor::leaf(vec![b, t, c], vd.clone());
        let y = masked_attention(&q, &k, &v, heads, &CausalAttend).unwrap();
        let w: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let wt = Tensor::from_vec(y.dims().to_vec(), w);
        let loss = sum_all(&crate::numerics::ops::mul(&y, &wt).unwrap());
        loss.backward();
        let h = 1e-6;
        for (name, data, tensor) in
            [("q", &qd, &q), ("k", &kd, &k), ("v", &vd, &v)]
        {
            let grad = tensor.grad().unwrap();
            for i in 0..data.len() {
                let mut p = data.clone();
                p[i] += h;
                let mut m = data.clone();
                m[i] -= h;
                let (fp, fm) = match name {
                    "q" => (run(&p, &kd, &vd), run(&m, &kd, &vd)),
                    "k" => (run(&qd, &p, &vd), run(&qd, &m, &vd)),
                    _ => (run(&qd, &kd, &p), run(&qd, &kd, &m)),
                };
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() < 1e-7,
                    "{name}[{i}]: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }
}
