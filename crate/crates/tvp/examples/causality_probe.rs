//! Perturb future frames and measure what leaks into past predictions
//! under each temporal-attention variant.
//!
//!     cargo run --example causality_probe

use tvp::numerics::{no_grad, ParamStore, Tensor};
use tvp::pipeline::RunConfig;
use tvp::rng::Rng;
use tvp::unet3d::{self, ForwardSpec, MaskKind, TemporalSpec};

fn main() -> tvp::Result<()> {
    let cfg = RunConfig::default();
    let ucfg = cfg.unet_config()?;
    let mut store2d = ParamStore::<f32>::new();
    unet3d::init_unet2d_params(&mut store2d, &ucfg, &mut Rng::new(21));
    // the zero-initialized output conv of a fresh network would hide all
    // leakage; give it weights as a trained checkpoint would have
    {
        let mut rng = Rng::new(20);
        let w = store2d.get("unet.conv_out.w")?;
        let mut data = vec![0f32; w.len()];
        for v in &mut data {
            *v = (rng.normal() * 0.05) as f32;
        }
        store2d.update("unet.conv_out.w", w.dims().to_vec(), data);
    }
    let store3d = unet3d::inflate(&store2d, &ucfg, &mut Rng::new(22))?;
    // give the fresh temporal layers live output projections so the
    // temporal paths actually carry signal
    let mut rng = Rng::new(23);
    for name in unet3d::temporal_param_names(&ucfg) {
        if name.ends_with(".o.w") {
            let t = store3d.get(&name)?;
            let mut data = vec![0f32; t.len()];
            for v in &mut data {
                *v = (rng.normal() * 0.2) as f32;
            }
            store3d.update(&name, t.dims().to_vec(), data);
        }
    }

    let n = ucfg.frames;
    let fsz = ucfg.in_channels * ucfg.latent_side * ucfg.latent_side;
    let x_data: Vec<f32> = (0..n * fsz).map(|_| rng.normal() as f32).collect();
    let kv = Tensor::from_vec(
        vec![n, ucfg.text_len, ucfg.text_dim],
        (0..n * ucfg.text_len * ucfg.text_dim).map(|_| rng.normal() as f32 * 0.3).collect(),
    );

    println!("max |change in frames <= i| after perturbing frames > i:");
    println!("{:>3}  {:>14} {:>14} {:>14}", "i", "ast", "directed", "bidirectional");
    for i in 0..n - 1 {
        let mut row = format!("{i:>3}");
        for kind in [MaskKind::Ast, MaskKind::Directed, MaskKind::Bidirectional] {
            let spec = ForwardSpec {
                videos: 1,
                frames: n,
                temporal: Some(TemporalSpec { kind, block_causal: false }),
            };
            let x = Tensor::from_vec(vec![n, ucfg.in_channels, ucfg.latent_side, ucfg.latent_side], x_data.clone());
            let base = no_grad(|| unet3d::unet_forward(&store3d, &ucfg, &x, &[400], &kv, spec))?;
            let mut perturbed = x_data.clone();
            for v in &mut perturbed[(i + 1) * fsz..] {
                *v += 2.0;
            }
            let xp = Tensor::from_vec(x.dims().to_vec(), perturbed);
            let out = no_grad(|| unet3d::unet_forward(&store3d, &ucfg, &xp, &[400], &kv, spec))?;
            let leak = base.data()[..(i + 1) * fsz]
                .iter()
                .zip(&out.data()[..(i + 1) * fsz])
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            row.push_str(&format!("  {leak:>13.6e}"));
        }
        println!("{row}");
    }
    println!("(causal variants must print exactly 0.0; bidirectional must not)");
    Ok(())
}
