//! Wall-time comparison of the three temporal-attention variants at the
//! working sizes. All variants run the same dense kernel; the causal
//! flattened variant should cost well under twice the per-site variants.
//!
//!     cargo run --example attention_timing

use tvp::unet3d::timing;

fn main() {
    println!("threads: {}", rayon::current_num_threads());
    let sizes = [(8usize, 64usize, 32usize), (8, 16, 64), (1, 64, 32), (4, 64, 32)];
    let rows = timing::attn_timing(&sizes, 20);
    print!("{}", timing::timing_csv(&rows));
    for ((n, s, c), ratio) in timing::ast_overhead_vs_directed(&rows).unwrap() {
        println!("ast/directed overhead at n={n} s={s} c={c}: {ratio:.3}x");
    }
}
