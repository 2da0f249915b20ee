//! Command-line driver for the training/evaluation stages.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tvp::diffusion::SamplerConfig;
use tvp::error::{Error, Result};
use tvp::pipeline::{self, default_cells, load_checkpoint, save_checkpoint, InitMode, RunConfig};
use tvp::synthdata::{self, DatasetConfig};
use tvp::unet3d::{timing, MaskKind};

#[derive(Parser)]
#[command(name = "tvp", about = "Text-conditioned video prediction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instructed-video dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Stage A: pretrain the 2D model on single frames.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage B: inflate a 2D checkpoint into the 3D form.
    Inflate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_attn)]
        attn: MaskKind,
        #[arg(long, default_value_t = false)]
        block_causal: bool,
    },
    /// Stage C: initialize the instruction decomposer.
    InitText {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: InitMode,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage D: fine-tune on clips.
    Finetune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_parser = parse_set)]
        set: pipeline::FinetuneSet,
        #[arg(long, default_value_t = 2)]
        ref_frames: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a clip from reference frames plus an instruction.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// SEERCLIP file supplying the reference frames.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        manipulate: bool,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Run the ablation matrix over attention kinds, init modes and
    /// fine-tune sets.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Benchmark the temporal-attention variants; writes the timing CSV.
    AttnTiming {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
}

fn parse_attn(s: &str) -> std::result::Result<MaskKind, String> {
    MaskKind::parse(s).ok_or_else(|| format!("unknown attention kind '{s}' (bidir|directed|ast)"))
}

fn parse_mode(s: &str) -> std::result::Result<InitMode, String> {
    InitMode::parse(s).ok_or_else(|| format!("unknown init mode '{s}' (identity|random)"))
}

fn parse_set(s: &str) -> std::result::Result<pipeline::FinetuneSet, String> {
    pipeline::FinetuneSet::parse(s).ok_or_else(|| {
        format!("unknown set '{s}' (temp|cross+temp|temp+fstext|cross+temp+fstext)")
    })
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// Config carried by a checkpoint, for stages that continue from one.
fn checkpoint_config(ckpt: &pipeline::Checkpoint) -> Result<RunConfig> {
    RunConfig::from_map(&ckpt.config)
}

fn write_ppm(path: &Path, frame: &[f32], side: usize) -> Result<()> {
    let mut buf = format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                let v = frame[ch * side * side + y * side + x];
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, frames, size } => {
            let cfg = DatasetConfig { count, frames, side: size, seed, ..Default::default() };
            let ds = synthdata::generate_dataset(&cfg)?;
            synthdata::write_dataset(&out, &ds, &cfg)?;
            println!(
                "wrote {} train / {} val clips ({} held-out combos) to {}",
                ds.train.len(),
                ds.val.len(),
                ds.held_out.len(),
                out.display()
            );
        }
        Command::Pretrain { data, out, config, steps, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.stage_a_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            println!("effective config:\n{cfg}");
            let (ckpt, curve) = pipeline::stage_a_pretrain(&data, &cfg)?;
            save_checkpoint(&out, &ckpt)?;
            println!(
                "stage A done: loss {:.5} -> {:.5}; checkpoint {}",
                curve.mean_first_decile(),
                curve.mean_last_decile(),
                out.display()
            );
        }
        Command::Inflate { input, out, attn, block_causal } => {
            let ckpt = load_checkpoint(&input)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            cfg.attn = attn;
            cfg.block_causal = block_causal;
            println!("effective config:\n{cfg}");
            let inflated = pipeline::inflate_stage(&ckpt, &cfg)?;
            save_checkpoint(&out, &inflated)?;
            println!("inflated ({}) -> {}", attn.name(), out.display());
        }
        Command::InitText { input, out, mode, data } => {
            let ckpt = load_checkpoint(&input)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            cfg.init_mode = mode;
            println!("effective config:\n{cfg}");
            let inited = pipeline::init_text_stage(&ckpt, &data, &cfg)?;
            if let Some(loss) = inited.config.get("meta.identity_loss") {
                println!("identity init loss: {loss}");
            }
            save_checkpoint(&out, &inited)?;
            println!("initialized ({}) -> {}", mode.name(), out.display());
        }
        Command::Finetune { input, data, out, set, ref_frames, steps, seed } => {
            let ckpt = load_checkpoint(&input)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            cfg.finetune_set = set;
            cfg.ref_frames = ref_frames;
            if let Some(s) = steps {
                cfg.finetune_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            println!("effective config:\n{cfg}");
            let (tuned, curve) = pipeline::stage_d_finetune(&ckpt, &data, &cfg)?;
            save_checkpoint(&out, &tuned)?;
            println!(
                "fine-tune done: loss {:.5} -> {:.5}; checkpoint {}",
                curve.mean_first_decile(),
                curve.mean_last_decile(),
                out.display()
            );
        }
        Command::Sample { ckpt, reference, text, out, steps, guidance, seed } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let cfg = checkpoint_config(&ckpt)?;
            let clip = synthdata::read_clip_file(&reference)?;
            if clip.n < cfg.ref_frames {
                return Err(Error::Data(format!(
                    "reference file has {} frames, config needs {}",
                    clip.n, cfg.ref_frames
                )));
            }
            let fsz = 3 * clip.h * clip.w;
            let refs = &clip.frames[..cfg.ref_frames * fsz];
            let sampler =
                SamplerConfig { steps, guidance_scale: guidance as f32, eta: cfg.eta, seed };
            let (pixels, _) = pipeline::sample_clip(&ckpt, &cfg, refs, &text, &sampler)?;
            std::fs::create_dir_all(&out)?;
            let side = cfg.image_side;
            for f in 0..cfg.frames {
                write_ppm(
                    &out.join(format!("frame_{f:02}.ppm")),
                    &pixels[f * fsz..(f + 1) * fsz],
                    side,
                )?;
            }
            synthdata::write_clip_file(&out.join("sample.clip"), &pixels, cfg.frames, side, side)?;
            println!("wrote {} frames to {}", cfg.frames, out.display());
        }
        Command::Eval { ckpt, data, out, manipulate, clips } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            if let Some(c) = clips {
                cfg.eval_clips = c;
            }
            let report = pipeline::evaluate(&ckpt, &data, &cfg, manipulate)?;
            std::fs::write(&out, report.to_csv())?;
            println!(
                "clips {}  compliance {:.3}  psnr {:.2}  refs_exact {}  failures {}",
                report.rows.len(),
                report.compliance_rate(),
                report.mean_psnr(),
                report.all_refs_exact(),
                report.failures
            );
            if let Some(fr) = report.flip_rate() {
                println!("manipulation flip rate {fr:.3}");
            }
            println!("report -> {}", out.display());
        }
        Command::Ablate { data, out, seeds, config } => {
            let cfg = load_config(&config)?;
            println!("effective config:\n{cfg}");
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let report =
                pipeline::ablate(&data, &out, &cfg, &seed_list, &default_cells(), |msg| {
                    println!("{msg}");
                })?;
            println!("{}", report.summary_csv());
            println!("results -> {}", out.join("results.csv").display());
        }
        Command::AttnTiming { out, runs } => {
            // desk sizes: both U-Net levels, plus a single-frame row
            let sizes = [(8usize, 64usize, 32usize), (8, 16, 64), (1, 64, 32)];
            let rows = timing::attn_timing(&sizes, runs.max(20));
            std::fs::write(&out, timing::timing_csv(&rows))?;
            println!("threads: {}", rayon::current_num_threads());
            for ((n, s, c), ratio) in timing::ast_overhead_vs_directed(&rows)? {
                println!("ast/directed at n={n} s={s} c={c}: {ratio:.3}x");
            }
            println!("timing csv -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
