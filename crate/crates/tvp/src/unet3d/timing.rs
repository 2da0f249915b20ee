//! Wall-time comparison of the temporal-attention variants.
//!
//! All three run the same dense attention kernel and differ only in the
//! mask, so the expected overhead of the flattened causal variant over the
//! per-site variants is small. Median over repeated runs; the CSV is the
//! external interface (kind, n, s, channels, median_ms, p10_ms, p90_ms).

use std::time::Instant;

use super::mask::{build_mask, MaskKind};
use crate::error::Result;
use crate::numerics::{masked_attention, no_grad, Tensor};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct TimingRow {
    pub kind: MaskKind,
    pub n: usize,
    pub s: usize,
    pub channels: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

/// Benchmark one (kind, n, s, channels) cell; `runs` >= 20 for the report.
pub fn time_attention(kind: MaskKind, n: usize, s: usize, channels: usize, runs: usize) -> TimingRow {
    let mut rng = Rng::new(42);
    let seq = n * s;
    let data = |r: &mut Rng| -> Vec<f32> { (0..seq * channels).map(|_| r.normal() as f32 * 0.3).collect() };
    let q = Tensor::from_vec(vec![1, seq, channels], data(&mut rng));
    let k = Tensor::from_vec(vec![1, seq, channels], data(&mut rng));
    let v = Tensor::from_vec(vec![1, seq, channels], data(&mut rng));
    let mask = build_mask(kind, n, s);
    let heads = (channels / 8).max(1);
    // warmup
    for _ in 0..3 {
        let _ = no_grad(|| masked_attention(&q, &k, &v, heads, &mask));
    }
    let mut samples: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            let out = no_grad(|| masked_attention(&q, &k, &v, heads, &mask));
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out.map(|o| o.data()[0]).unwrap_or(0.0));
            dt
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
    TimingRow {
        kind,
        n,
        s,
        channels,
        median_ms: pick(0.5),
        p10_ms: pick(0.1),
        p90_ms: pick(0.9),
    }
}

/// Run the full comparison over sizes; one row per (kind, size).
pub fn attn_timing(sizes: &[(usize, usize, usize)], runs: usize) -> Vec<TimingRow> {
    let mut rows = Vec::new();
    for &(n, s, channels) in sizes {
        for kind in [MaskKind::Bidirectional, MaskKind::Directed, MaskKind::Ast] {
            rows.push(time_attention(kind, n, s, channels, runs));
        }
    }
    rows
}

/// Serialize rows as the benchmark CSV.
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("kind,n,s,channels,median_ms,p10_ms,p90_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.kind.name(),
            r.n,
            r.s,
            r.channels,
            r.median_ms,
            r.p10_ms,
            r.p90_ms
        ));
    }
    out
}

/// Median-time ratio of ast to directed at matching sizes.
pub fn ast_overhead_vs_directed(rows: &[TimingRow]) -> Result<Vec<((usize, usize, usize), f64)>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.kind == MaskKind::Ast) {
        if let Some(d) = rows
            .iter()
            .find(|d| d.kind == MaskKind::Directed && (d.n, d.s, d.channels) == (r.n, r.s, r.channels))
        {
            out.push(((r.n, r.s, r.channels), r.median_ms / d.median_ms));
        }
    }
    Ok(out)
}
