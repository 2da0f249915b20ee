//! Sample a clip from a fine-tuned checkpoint: reference frames plus an
//! instruction in, predicted frames out (PPM images + raw clip file).
//!
//!     cargo run --example sample_clip -- CKPT DATA_DIR [INSTRUCTION]

use tvp::diffusion::SamplerConfig;
use tvp::pipeline::{load_checkpoint, sample_clip, RunConfig};
use tvp::synthdata::{self, oracle_check};

fn main() -> tvp::Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(ckpt_path), Some(data_dir)) = (args.next(), args.next()) else {
        eprintln!("usage: sample_clip CKPT DATA_DIR [INSTRUCTION]");
        std::process::exit(2);
    };
    let ckpt = load_checkpoint(std::path::Path::new(&ckpt_path))?;
    let cfg = RunConfig::from_map(&ckpt.config)?;
    let entries = synthdata::read_manifest(&std::path::Path::new(&data_dir).join("val"))?;
    let entry = &entries[0];
    let instruction = args.next().unwrap_or_else(|| entry.instruction.clone());
    let clip = synthdata::read_clip_file(&entry.path)?;
    let fsz = 3 * clip.h * clip.w;
    let refs = &clip.frames[..cfg.ref_frames * fsz];

    let sampler = SamplerConfig {
        steps: cfg.sample_steps,
        guidance_scale: cfg.guidance as f32,
        eta: cfg.eta,
        seed: 99,
    };
    println!("sampling '{}' from {} reference frames...", instruction, cfg.ref_frames);
    let (pixels, _) = sample_clip(&ckpt, &cfg, refs, &instruction, &sampler)?;
    let verdict = oracle_check(&pixels, cfg.frames, cfg.image_side, &instruction)?;
    println!(
        "oracle: verb_match={} detected={:?} slope={:.2} confidence={:.2}",
        verdict.verb_match, verdict.detected_verb, verdict.slope, verdict.detection_confidence
    );
    let out = std::path::Path::new("target/sampled_clip");
    std::fs::create_dir_all(out)?;
    synthdata::write_clip_file(&out.join("sample.clip"), &pixels, cfg.frames, clip.h, clip.w)?;
    println!("wrote {}", out.join("sample.clip").display());
    Ok(())
}
