//! Miniature end-to-end run of every stage: dataset, pretrain, inflate,
//! identity-init, fine-tune, evaluate. Budgets here are tiny; the point
//! is to show the full wiring, not to reach strong compliance.
//!
//!     cargo run --example train_pipeline

use tvp::pipeline::{self, RunConfig};
use tvp::synthdata::{generate_dataset, write_dataset, DatasetConfig};

fn main() -> tvp::Result<()> {
    let data_dir = std::path::PathBuf::from("target/pipeline_demo/data");
    let ds_cfg = DatasetConfig { count: 60, seed: 3, ..Default::default() };
    write_dataset(&data_dir, &generate_dataset(&ds_cfg)?, &ds_cfg)?;
    println!("dataset ready");

    let mut cfg = RunConfig {
        stage_a_steps: 120,
        identity_steps: 250,
        finetune_steps: 40,
        eval_clips: 4,
        sample_steps: 10,
        ..Default::default()
    };
    cfg.seed = 1;

    let (ckpt2d, curve_a) = pipeline::stage_a_pretrain(&data_dir, &cfg)?;
    println!(
        "stage A: loss {:.4} -> {:.4}",
        curve_a.mean_first_decile(),
        curve_a.mean_last_decile()
    );
    let inflated = pipeline::inflate_stage(&ckpt2d, &cfg)?;
    println!("inflated: {} parameters", inflated.store.element_count());
    let inited = pipeline::init_text_stage(&inflated, &data_dir, &cfg)?;
    println!(
        "identity init loss: {}",
        inited.config.get("meta.identity_loss").map(String::as_str).unwrap_or("n/a")
    );
    let (tuned, curve_d) = pipeline::stage_d_finetune(&inited, &data_dir, &cfg)?;
    println!(
        "fine-tune: loss {:.4} -> {:.4}",
        curve_d.mean_first_decile(),
        curve_d.mean_last_decile()
    );
    let report = pipeline::evaluate(&tuned, &data_dir, &cfg, false)?;
    println!(
        "eval on {} clips: compliance {:.2}, psnr {:.1}, refs exact: {}",
        report.rows.len(),
        report.compliance_rate(),
        report.mean_psnr(),
        report.all_refs_exact()
    );
    Ok(())
}
