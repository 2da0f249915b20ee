//! Finite-difference verification of every differentiable block, in
//! 64-bit mode with central differences (h = 1e-5).
//!
//!     cargo run --example gradcheck

use tvp::fstext::{self, FSTextConfig};
use tvp::numerics::{grad_check, ParamStore};
use tvp::rng::Rng;
use tvp::unet3d;

fn main() -> tvp::Result<()> {
    println!("block gradient checks (f64, h = 1e-5):");
    for (name, err) in unet3d::micro_grad_checks(1e-5)? {
        println!("  {name:<22} max rel err {err:.3e}");
    }

    // one decomposer layer against the identity objective
    let cfg = FSTextConfig { frames: 2, tokens_per_frame: 3, dim: 8, depth: 1, heads: 1 };
    let mut store = ParamStore::<f64>::new();
    fstext::init_fstext_params(&mut store, &cfg, &mut Rng::new(3));
    let global = tvp::textstack::GlobalTextEmbedding {
        tokens: tvp::numerics::Tensor::from_vec(
            vec![3, 8],
            (0..24).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect(),
        ),
        length: 3,
    };
    let report = grad_check(&store, |s| fstext::identity_loss(s, &cfg, &global), 1e-5)?;
    println!("  {:<22} max rel err {:.3e}", "fstext_layer", report.max_rel_err);
    Ok(())
}
