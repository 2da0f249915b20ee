//! Inflate a 2D network and verify the 3D forward reproduces it
//! frame-wise, for all three temporal-attention variants.
//!
//!     cargo run --example inflation_equivalence

use tvp::numerics::{no_grad, ParamStore, Tensor};
use tvp::pipeline::RunConfig;
use tvp::rng::Rng;
use tvp::unet3d::{self, ForwardSpec, MaskKind, TemporalSpec};

fn main() -> tvp::Result<()> {
    let cfg = RunConfig::default();
    let ucfg = cfg.unet_config()?;
    let mut store2d = ParamStore::<f32>::new();
    unet3d::init_unet2d_params(&mut store2d, &ucfg, &mut Rng::new(11));
    let store3d = unet3d::inflate(&store2d, &ucfg, &mut Rng::new(12))?;
    println!(
        "2D parameters: {} elements; 3D: {} elements",
        store2d.element_count(),
        store3d.element_count()
    );

    let n = ucfg.frames;
    let mut rng = Rng::new(5);
    let count = n * ucfg.in_channels * ucfg.latent_side * ucfg.latent_side;
    let x = Tensor::from_vec(
        vec![n, ucfg.in_channels, ucfg.latent_side, ucfg.latent_side],
        (0..count).map(|_| rng.normal() as f32).collect(),
    );
    // one shared text row per frame, as after perfect identity init
    let row: Vec<f32> = (0..ucfg.text_len * ucfg.text_dim).map(|_| rng.normal() as f32 * 0.3).collect();
    let mut kv_data = Vec::new();
    for _ in 0..n {
        kv_data.extend_from_slice(&row);
    }
    let kv = Tensor::from_vec(vec![n, ucfg.text_len, ucfg.text_dim], kv_data);

    let out2d = no_grad(|| {
        unet3d::unet_forward(
            &store2d,
            &ucfg,
            &x,
            &vec![300; n],
            &kv,
            ForwardSpec { videos: n, frames: 1, temporal: None },
        )
    })?;
    for kind in [MaskKind::Ast, MaskKind::Directed, MaskKind::Bidirectional] {
        let out3d = no_grad(|| {
            unet3d::unet_forward(
                &store3d,
                &ucfg,
                &x,
                &[300],
                &kv,
                ForwardSpec {
                    videos: 1,
                    frames: n,
                    temporal: Some(TemporalSpec { kind, block_causal: false }),
                },
            )
        })?;
        let max_diff = out2d
            .data()
            .iter()
            .zip(out3d.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        println!("{:<14} max |3D - frame-wise 2D| = {max_diff:.2e}", kind.name());
    }
    Ok(())
}
