//! Stage orchestration: pretrain, inflate, identity-init, fine-tune,
//! sample, evaluate, ablate.
//!
//! Pipeline: (A) pretrain the 2D U-Net plus text encoder on single frames;
//! (B) inflate to 3D; (C) identity-initialize the instruction decomposer;
//! (D) fine-tune the configured parameter set on clips with clean
//! reference frames; (E) sample and score with the compliance oracle.
//! Every stage is a deterministic function of its inputs and the seed.

pub mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{FinetuneSet, InitMode, RunConfig};

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec;
use crate::diffusion::{
    cosine_schedule, forward_noise, sample_video, Cond, DenoiseModel, SamplerConfig, VideoLatent,
};
use crate::error::{Error, Result};
use crate::fstext::{self, IdentityInitOptions};
use crate::numerics::{
    cosine_lr, digest_params, mul, no_grad, reshape, scale, stack_rows, sub, sum_all, AdamW,
    AdamWConfig, ParamStore, Tensor,
};
use crate::rng::Rng;
use crate::synthdata::{self, ManifestEntry};
use crate::textstack::{self, GlobalTextEmbedding, TextConfig, Vocabulary};
use crate::unet3d::{self, ForwardSpec, TemporalSpec, UNetConfig};

/// Training-loss trace of one stage.
#[derive(Clone, Debug, Default)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
}

impl TrainCurve {
    pub fn mean_first_decile(&self) -> f64 {
        let k = (self.losses.len() / 10).max(1);
        self.losses[..k.min(self.losses.len())].iter().sum::<f64>() / k as f64
    }

    pub fn mean_last_decile(&self) -> f64 {
        let k = (self.losses.len() / 10).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    pub fn decreased(&self) -> bool {
        self.mean_last_decile() < self.mean_first_decile()
    }
}

/// In-memory training split: manifest plus pre-encoded latents per clip.
struct LoadedSplit {
    entries: Vec<ManifestEntry>,
    latents: Vec<Vec<f32>>, // [n, c, h, w] per clip
}

fn load_split(dir: &Path, cfg: &RunConfig) -> Result<LoadedSplit> {
    let spec = cfg.latent_spec()?;
    let entries = synthdata::read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", dir.display())));
    }
    let mut latents = Vec::with_capacity(entries.len());
    for e in &entries {
        let clip = synthdata::read_clip_file(&e.path)?;
        if clip.n != cfg.frames || clip.h != cfg.image_side || clip.w != cfg.image_side {
            return Err(Error::Data(format!(
                "{}: clip is {}x{}x{}, config wants {}x{}x{}",
                e.path.display(),
                clip.n,
                clip.h,
                clip.w,
                cfg.frames,
                cfg.image_side,
                cfg.image_side
            )));
        }
        latents.push(codec::encode_clip(&clip.frames, clip.n, &spec)?);
    }
    Ok(LoadedSplit { entries, latents })
}

fn mse_loss(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let diff = sub(pred, target)?;
    let sq = mul(&diff, &diff)?;
    let (summed, count) = match mask {
        Some(m) => {
            let masked = mul(&sq, m)?;
            let count: f32 = m.data().iter().sum();
            (sum_all(&masked), count)
        }
        None => (sum_all(&sq), pred.len() as f32),
    };
    Ok(scale(&summed, 1.0 / count))
}

fn encode_instruction(
    store: &ParamStore<f32>,
    tcfg: &TextConfig,
    vocab: &Vocabulary,
    text: &str,
) -> Result<GlobalTextEmbedding<f32>> {
    let ids = vocab.tokenize(text, tcfg.len)?;
    textstack::encode_text(store, tcfg, &ids)
}

/// Stage A: train the 2D U-Net and text encoder jointly on single frames
/// with the epsilon-prediction objective and conditioning dropout.
pub fn stage_a_pretrain(data_dir: &Path, cfg: &RunConfig) -> Result<(Checkpoint, TrainCurve)> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let tcfg = cfg.text_config();
    let ucfg = cfg.unet_config()?;
    let sched = cosine_schedule(cfg.t_steps)?;
    let split = load_split(&data_dir.join("train"), cfg)?;

    let mut store = ParamStore::<f32>::new();
    let rng = Rng::new(cfg.seed).derive(&[0x696e6974]);
    textstack::init_text_params(&mut store, &vocab, &tcfg, &mut rng.derive(&[0]));
    unet3d::init_unet2d_params(&mut store, &ucfg, &mut rng.derive(&[1]));

    let mut opt = AdamW::new(AdamWConfig::default());
    let mut curve = TrainCurve::default();
    let frame_size = ucfg.in_channels * ucfg.latent_side * ucfg.latent_side;
    let sample_rng = Rng::new(cfg.seed).derive(&[0x73746167, 0xa]);

    for step in 0..cfg.stage_a_steps {
        store.clear_grads();
        let mut step_loss = 0.0;
        for acc in 0..cfg.grad_accum {
            let mut x_data = Vec::with_capacity(cfg.stage_a_batch * frame_size);
            let mut eps_data = Vec::with_capacity(cfg.stage_a_batch * frame_size);
            let mut ts = Vec::with_capacity(cfg.stage_a_batch);
            let mut kv_parts = Vec::with_capacity(cfg.stage_a_batch);
            for item in 0..cfg.stage_a_batch {
                let mut r = sample_rng.derive(&[step as u64, acc as u64, item as u64]);
                let clip_idx = r.below(split.entries.len());
                let frame = r.below(cfg.frames);
                let t = 1 + r.below(cfg.t_steps);
                let x0 = &split.latents[clip_idx][frame * frame_size..(frame + 1) * frame_size];
                let eps: Vec<f32> = (0..frame_size).map(|_| r.normal() as f32).collect();
                let xt = forward_noise(x0, t, &eps, &sched)?;
                x_data.extend_from_slice(&xt);
                eps_data.extend_from_slice(&eps);
                ts.push(t);
                let text = if r.uniform() < cfg.cond_dropout {
                    String::new()
                } else {
                    split.entries[clip_idx].instruction.clone()
                };
                let g = encode_instruction(&store, &tcfg, &vocab, &text)?;
                kv_parts.push(g.tokens);
            }
            let b = cfg.stage_a_batch;
            let x = Tensor::from_vec(
                vec![b, ucfg.in_channels, ucfg.latent_side, ucfg.latent_side],
                x_data,
            );
            let target = Tensor::from_vec(x.dims().to_vec(), eps_data);
            let kv = reshape(&stack_rows(&kv_parts)?, vec![b, tcfg.len, tcfg.dim])?;
            let eps_hat = unet3d::unet_forward(
                &store,
                &ucfg,
                &x,
                &ts,
                &kv,
                ForwardSpec { videos: b, frames: 1, temporal: None },
            )?;
            let loss = scale(&mse_loss(&eps_hat, &target, None)?, 1.0 / cfg.grad_accum as f32);
            let val = loss.item() as f64 * cfg.grad_accum as f64;
            if !val.is_finite() {
                return Err(Error::Numeric(format!("stage A: loss diverged at step {step}")));
            }
            step_loss += val / cfg.grad_accum as f64;
            loss.backward();
        }
        let lr = cosine_lr(cfg.stage_a_lr, step, cfg.stage_a_steps, cfg.warmup_frac);
        opt.step(&store, lr)?;
        curve.losses.push(step_loss);
    }

    let mut config = cfg.to_map();
    config.insert("meta.stage".into(), "2d".into());
    if !curve.losses.is_empty() {
        config.insert(
            "meta.stage_a_loss_first".into(),
            format!("{:.6}", curve.mean_first_decile()),
        );
        config.insert(
            "meta.stage_a_loss_last".into(),
            format!("{:.6}", curve.mean_last_decile()),
        );
    }
    Ok((Checkpoint { config, vocab, store }, curve))
}

/// Stage B: inflate the 2D checkpoint to the 3D form and create the
/// (not yet initialized) instruction decomposer.
pub fn inflate_stage(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Checkpoint> {
    let stage = ckpt.config.get("meta.stage").map(String::as_str).unwrap_or("");
    if stage != "2d" {
        return Err(Error::Config(format!(
            "inflate expects a 2D pretraining checkpoint, found stage '{stage}'"
        )));
    }
    let ucfg = cfg.unet_config()?;
    let fcfg = cfg.fstext_config();
    let mut rng = Rng::new(cfg.seed).derive(&[0x696e666c]);
    let mut store = unet3d::inflate(&ckpt.store, &ucfg, &mut rng)?;
    fstext::init_fstext_params(&mut store, &fcfg, &mut rng.derive(&[1]));
    store.freeze_except(|n| n.contains(".tattn") || n.starts_with("fstext."));
    let mut config = cfg.to_map();
    config.insert("meta.stage".into(), "3d".into());
    Ok(Checkpoint { config, vocab: ckpt.vocab.clone(), store })
}

/// Stage C: identity-initialize the decomposer on the training
/// instructions (or leave it random, per the ablation arm).
pub fn init_text_stage(ckpt: &Checkpoint, data_dir: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let stage = ckpt.config.get("meta.stage").map(String::as_str).unwrap_or("");
    if stage != "3d" {
        return Err(Error::Config(format!(
            "init-text expects an inflated checkpoint, found stage '{stage}'"
        )));
    }
    let store = ckpt.store.clone_store();
    let tcfg = cfg.text_config();
    let fcfg = cfg.fstext_config();
    let mut config = cfg.to_map();
    config.insert("meta.stage".into(), "3d-init".into());
    config.insert("meta.init_mode".into(), cfg.init_mode.name().into());
    if cfg.init_mode == InitMode::Identity {
        let entries = synthdata::read_manifest(&data_dir.join("train"))?;
        let mut seen = std::collections::BTreeSet::new();
        let mut corpus = Vec::new();
        for e in &entries {
            if seen.insert(e.instruction.clone()) {
                corpus.push(no_grad(|| {
                    encode_instruction(&store, &tcfg, &ckpt.vocab, &e.instruction)
                })?);
            }
        }
        let opts = IdentityInitOptions {
            max_steps: cfg.identity_steps,
            batch: cfg.identity_batch,
            lr: cfg.identity_lr,
            tol: cfg.identity_tol,
            seed: cfg.seed,
        };
        let report = fstext::identity_init(&store, &fcfg, &corpus, &opts)?;
        if !report.reached_tol {
            eprintln!(
                "warning: identity init stopped at loss {:.6} after {} steps (tolerance {})",
                report.final_loss, report.steps_run, cfg.identity_tol
            );
        }
        config.insert("meta.identity_loss".into(), format!("{:.8}", report.final_loss));
        config.insert("meta.identity_steps".into(), report.steps_run.to_string());
    }
    store.freeze_except(|n| n.contains(".tattn") || n.starts_with("fstext."));
    Ok(Checkpoint { config, vocab: ckpt.vocab.clone(), store })
}

impl Checkpoint {
    /// Deep copy (stages must not mutate their input checkpoints).
    pub fn clone_all(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone_store(),
        }
    }
}

/// Stage D: fine-tune the configured parameter set on clips. Reference
/// frames stay clean in the input and are excluded from the loss.
pub fn stage_d_finetune(
    ckpt: &Checkpoint,
    data_dir: &Path,
    cfg: &RunConfig,
) -> Result<(Checkpoint, TrainCurve)> {
    cfg.validate()?;
    let stage = ckpt.config.get("meta.stage").map(String::as_str).unwrap_or("");
    if stage != "3d-init" && stage != "3d" {
        return Err(Error::Config(format!(
            "finetune expects an inflated (optionally initialized) checkpoint, found '{stage}'"
        )));
    }
    let store = ckpt.store.clone_store();
    let vocab = ckpt.vocab.clone();
    let tcfg = cfg.text_config();
    let ucfg = cfg.unet_config()?;
    let fcfg = cfg.fstext_config();
    let sched = cosine_schedule(cfg.t_steps)?;
    let split = load_split(&data_dir.join("train"), cfg)?;

    // exact frozen-flag assignment for the requested set
    store.freeze_except(|name| cfg.finetune_set.trainable(name));
    let frozen = store.frozen_names();
    let digest_before = digest_params(&store, &frozen);

    // text encoder is frozen from here on: pre-encode every instruction
    let mut text_cache: BTreeMap<String, GlobalTextEmbedding<f32>> = BTreeMap::new();
    text_cache.insert(String::new(), no_grad(|| encode_instruction(&store, &tcfg, &vocab, ""))?);
    for e in &split.entries {
        if !text_cache.contains_key(&e.instruction) {
            let g = no_grad(|| encode_instruction(&store, &tcfg, &vocab, &e.instruction))?;
            text_cache.insert(e.instruction.clone(), g);
        }
    }

    let n = cfg.frames;
    let r = cfg.ref_frames;
    let frame_size = ucfg.in_channels * ucfg.latent_side * ucfg.latent_side;
    // loss mask: zero on reference slots, one elsewhere
    let mask_data: Vec<f32> = (0..cfg.finetune_batch * n * frame_size)
        .map(|i| if (i / frame_size) % n < r { 0.0 } else { 1.0 })
        .collect();
    let mask = Tensor::from_vec(
        vec![cfg.finetune_batch * n, ucfg.in_channels, ucfg.latent_side, ucfg.latent_side],
        mask_data,
    );
    let temporal = Some(TemporalSpec { kind: cfg.attn, block_causal: cfg.block_causal });
    let sample_rng = Rng::new(cfg.seed).derive(&[0x73746167, 0xd]);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut curve = TrainCurve::default();

    for step in 0..cfg.finetune_steps {
        store.clear_grads();
        let mut step_loss = 0.0;
        for acc in 0..cfg.grad_accum {
            let b = cfg.finetune_batch;
            let mut x_data = Vec::with_capacity(b * n * frame_size);
            let mut eps_data = Vec::with_capacity(b * n * frame_size);
            let mut ts = Vec::with_capacity(b);
            let mut texts = Vec::with_capacity(b);
            for item in 0..b {
                let mut rr = sample_rng.derive(&[step as u64, acc as u64, item as u64]);
                let clip_idx = rr.below(split.entries.len());
                let t = 1 + rr.below(cfg.t_steps);
                ts.push(t);
                let clip_latents = &split.latents[clip_idx];
                for f in 0..n {
                    let x0 = &clip_latents[f * frame_size..(f + 1) * frame_size];
                    if f < r {
                        x_data.extend_from_slice(x0);
                        eps_data.extend(std::iter::repeat_n(0f32, frame_size));
                    } else {
                        let eps: Vec<f32> = (0..frame_size).map(|_| rr.normal() as f32).collect();
                        let xt = forward_noise(x0, t, &eps, &sched)?;
                        x_data.extend_from_slice(&xt);
                        eps_data.extend_from_slice(&eps);
                    }
                }
                let text = if rr.uniform() < cfg.cond_dropout {
                    ""
                } else {
                    split.entries[clip_idx].instruction.as_str()
                };
                texts.push(text);
            }
            let x = Tensor::from_vec(
                vec![b * n, ucfg.in_channels, ucfg.latent_side, ucfg.latent_side],
                x_data,
            );
            let target = Tensor::from_vec(x.dims().to_vec(), eps_data);
            let globals: Vec<&GlobalTextEmbedding<f32>> =
                texts.iter().map(|t| &text_cache[*t]).collect();
            let subs = fstext::decompose_batch(&store, &fcfg, &globals)?;
            let kv = reshape(&subs, vec![b * n, tcfg.len, tcfg.dim])?;
            let eps_hat = unet3d::unet_forward(
                &store,
                &ucfg,
                &x,
                &ts,
                &kv,
                ForwardSpec { videos: b, frames: n, temporal },
            )?;
            let loss =
                scale(&mse_loss(&eps_hat, &target, Some(&mask))?, 1.0 / cfg.grad_accum as f32);
            let val = loss.item() as f64 * cfg.grad_accum as f64;
            if !val.is_finite() {
                return Err(Error::Numeric(format!("finetune: loss diverged at step {step}")));
            }
            step_loss += val / cfg.grad_accum as f64;
            loss.backward();
        }
        let lr = cosine_lr(cfg.finetune_lr, step, cfg.finetune_steps, cfg.warmup_frac);
        opt.step(&store, lr)?;
        curve.losses.push(step_loss);
    }

    if digest_params(&store, &frozen) != digest_before {
        return Err(Error::Numeric(
            "frozen parameters changed during fine-tuning (invariant violation)".into(),
        ));
    }

    let mut config = cfg.to_map();
    for (k, v) in &ckpt.config {
        if k.starts_with("meta.") && k != "meta.stage" {
            config.insert(k.clone(), v.clone());
        }
    }
    config.insert("meta.stage".into(), "finetuned".into());
    if !curve.losses.is_empty() {
        config.insert(
            "meta.finetune_loss_first".into(),
            format!("{:.6}", curve.mean_first_decile()),
        );
        config.insert(
            "meta.finetune_loss_last".into(),
            format!("{:.6}", curve.mean_last_decile()),
        );
    }
    Ok((Checkpoint { config, vocab, store }, curve))
}

/// A checkpoint wired up as a sampler model for one instruction.
pub struct ConditionedSampler<'a> {
    store: &'a ParamStore<f32>,
    ucfg: UNetConfig,
    tcfg: TextConfig,
    temporal: TemporalSpec,
    subs_cond: Tensor<f32>,
    subs_null: Tensor<f32>,
}

impl<'a> ConditionedSampler<'a> {
    pub fn new(ckpt: &'a Checkpoint, cfg: &RunConfig, instruction: &str) -> Result<Self> {
        let tcfg = cfg.text_config();
        let fcfg = cfg.fstext_config();
        let ucfg = cfg.unet_config()?;
        let (subs_cond, subs_null) = no_grad(|| -> Result<_> {
            let g_cond = encode_instruction(&ckpt.store, &tcfg, &ckpt.vocab, instruction)?;
            let g_null = encode_instruction(&ckpt.store, &tcfg, &ckpt.vocab, "")?;
            let cond = fstext::decompose(&ckpt.store, &fcfg, &g_cond)?;
            let null = fstext::decompose(&ckpt.store, &fcfg, &g_null)?;
            Ok((cond.tokens, null.tokens))
        })?;
        Ok(ConditionedSampler {
            store: &ckpt.store,
            ucfg,
            tcfg,
            temporal: TemporalSpec { kind: cfg.attn, block_causal: cfg.block_causal },
            subs_cond,
            subs_null,
        })
    }

    fn forward(
        &self,
        z: &VideoLatent,
        t: usize,
        kv: &Tensor<f32>,
        videos: usize,
    ) -> Result<VideoLatent> {
        let n = z.frames / videos;
        let x = Tensor::from_vec(vec![z.frames, z.channels, z.h, z.w], z.data.clone());
        let out = no_grad(|| {
            unet3d::unet_forward(
                self.store,
                &self.ucfg,
                &x,
                &vec![t; videos],
                kv,
                ForwardSpec { videos, frames: n, temporal: Some(self.temporal) },
            )
        })?;
        Ok(VideoLatent {
            frames: z.frames,
            channels: z.channels,
            h: z.h,
            w: z.w,
            data: out.data().to_vec(),
        })
    }
}

impl DenoiseModel for ConditionedSampler<'_> {
    fn predict(&self, z: &VideoLatent, t: usize, cond: Cond) -> Result<VideoLatent> {
        let subs = match cond {
            Cond::Instruction => &self.subs_cond,
            Cond::Null => &self.subs_null,
        };
        let kv = reshape(subs, vec![z.frames, self.tcfg.len, self.tcfg.dim])?;
        self.forward(z, t, &kv, 1)
    }

    /// One batched forward for both guidance branches; frame-local and
    /// per-video ops make this bit-identical to two separate calls.
    fn predict_both(&self, z: &VideoLatent, t: usize) -> Result<(VideoLatent, VideoLatent)> {
        let n = z.frames;
        let mut z2 = VideoLatent::zeros(2 * n, z.channels, z.h, z.w);
        z2.data[..z.data.len()].copy_from_slice(&z.data);
        z2.data[z.data.len()..].copy_from_slice(&z.data);
        let kv = reshape(
            &stack_rows(&[self.subs_cond.clone(), self.subs_null.clone()])?,
            vec![2 * n, self.tcfg.len, self.tcfg.dim],
        )?;
        let out = self.forward(&z2, t, &kv, 2)?;
        let half = z.data.len();
        let mut cond = VideoLatent::zeros(n, z.channels, z.h, z.w);
        let mut null = VideoLatent::zeros(n, z.channels, z.h, z.w);
        cond.data.copy_from_slice(&out.data[..half]);
        null.data.copy_from_slice(&out.data[half..]);
        Ok((cond, null))
    }
}

/// Sample a full clip from reference frames plus an instruction; returns
/// (pixels [n, 3, H, W], latents).
pub fn sample_clip(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    ref_pixels: &[f32],
    instruction: &str,
    sampler: &SamplerConfig,
) -> Result<(Vec<f32>, VideoLatent)> {
    let spec = cfg.latent_spec()?;
    let r = cfg.ref_frames;
    if ref_pixels.len() != r * 3 * cfg.image_side * cfg.image_side {
        return Err(Error::Shape(format!(
            "sample_clip: {} reference pixel values for {r} frames of {}x{}",
            ref_pixels.len(),
            cfg.image_side,
            cfg.image_side
        )));
    }
    let sched = cosine_schedule(cfg.t_steps)?;
    let ref_latents = VideoLatent {
        frames: r,
        channels: spec.channels(),
        h: spec.latent_side(),
        w: spec.latent_side(),
        data: codec::encode_clip(ref_pixels, r, &spec)?,
    };
    let model = ConditionedSampler::new(ckpt, cfg, instruction)?;
    let z = sample_video(&model, &ref_latents, cfg.frames, &sched, sampler)?;
    let pixels = codec::decode_clip(&z.data, cfg.frames, &spec)?;
    Ok((pixels, z))
}

/// Per-clip evaluation record.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub clip_id: String,
    pub verb: synthdata::Verb,
    pub compliance: bool,
    pub slope: f64,
    pub confidence: f64,
    pub psnr: f64,
    pub ref_exact: bool,
    pub flip_compliance: Option<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: usize,
}

impl EvalReport {
    pub fn compliance_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.compliance).count() as f64 / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn all_refs_exact(&self) -> bool {
        self.rows.iter().all(|r| r.ref_exact)
    }

    pub fn flip_rate(&self) -> Option<f64> {
        let flips: Vec<bool> = self.rows.iter().filter_map(|r| r.flip_compliance).collect();
        if flips.is_empty() {
            None
        } else {
            Some(flips.iter().filter(|&&b| b).count() as f64 / flips.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "clip_id,verb,compliance,slope,confidence,psnr,ref_exact,flip_compliance\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.3},{:.3},{},{}\n",
                r.clip_id,
                r.verb.key(),
                r.compliance as u8,
                r.slope,
                r.confidence,
                r.psnr,
                r.ref_exact as u8,
                r.flip_compliance.map_or(String::new(), |b| (b as u8).to_string()),
            ));
        }
        out
    }
}

fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse: f64 =
        a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Evaluate a fine-tuned checkpoint on a validation split: compliance,
/// PSNR against ground truth, exact reference preservation, and (with
/// `manipulate`) the verb-flip rate on instruction-manipulation pairs.
pub fn evaluate(
    ckpt: &Checkpoint,
    data_dir: &Path,
    cfg: &RunConfig,
    manipulate: bool,
) -> Result<EvalReport> {
    let entries = synthdata::read_manifest(&data_dir.join("val"))?;
    let take =
        if cfg.eval_clips == 0 { entries.len() } else { cfg.eval_clips.min(entries.len()) };
    let side = cfg.image_side;
    let fsz = 3 * side * side;
    let r = cfg.ref_frames;
    let mut report = EvalReport::default();
    let eval_rng = Rng::new(cfg.seed).derive(&[0x6576616c]);

    for (idx, entry) in entries.iter().take(take).enumerate() {
        let clip = synthdata::read_clip_file(&entry.path)?;
        let refs = &clip.frames[..r * fsz];
        let seed = eval_rng.derive(&[idx as u64]).next_u64();
        let sampler = SamplerConfig {
            steps: cfg.sample_steps,
            guidance_scale: cfg.guidance as f32,
            eta: cfg.eta,
            seed,
        };
        let sampled = sample_clip(ckpt, cfg, refs, &entry.instruction, &sampler);
        let (pixels, _) = match sampled {
            Ok(p) => p,
            Err(e) => {
                eprintln!("warning: sampling {} failed: {e}", entry.clip_id);
                report.failures += 1;
                continue;
            }
        };
        let verdict = synthdata::oracle_check(&pixels, cfg.frames, side, &entry.instruction)?;
        let mut ref_exact = true;
        for i in 0..r * fsz {
            if pixels[i] != clip.frames[i] {
                ref_exact = false;
                break;
            }
        }
        let mut psnr_sum = 0.0;
        for f in r..cfg.frames {
            psnr_sum +=
                psnr(&pixels[f * fsz..(f + 1) * fsz], &clip.frames[f * fsz..(f + 1) * fsz]);
        }
        let flip_compliance = if manipulate {
            let flipped =
                synthdata::instruction_for(entry.verb.flipped(), entry.color, entry.shape);
            let flip_seed = eval_rng.derive(&[idx as u64, 1]).next_u64();
            let flip_sampler = SamplerConfig { seed: flip_seed, ..sampler };
            match sample_clip(ckpt, cfg, refs, &flipped, &flip_sampler) {
                Ok((fp, _)) => {
                    let v = synthdata::oracle_check(&fp, cfg.frames, side, &flipped)?;
                    Some(v.verb_match)
                }
                Err(e) => {
                    eprintln!("warning: manipulation sampling {} failed: {e}", entry.clip_id);
                    None
                }
            }
        } else {
            None
        };
        report.rows.push(EvalRow {
            clip_id: entry.clip_id.clone(),
            verb: entry.verb,
            compliance: verdict.verb_match,
            slope: verdict.slope,
            confidence: verdict.detection_confidence,
            psnr: psnr_sum / (cfg.frames - r) as f64,
            ref_exact,
            flip_compliance,
        });
    }
    Ok(report)
}

/// One ablation arm.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub name: &'static str,
    pub attn: unet3d::MaskKind,
    pub init_mode: InitMode,
    pub finetune_set: FinetuneSet,
    /// Skip fine-tuning entirely (the untrained baseline).
    pub untrained: bool,
}

/// The cells the acceptance orderings need: the three temporal-attention
/// variants, the random-init arm, the over-wide fine-tune set, and the
/// untrained baseline.
pub fn default_cells() -> Vec<CellSpec> {
    use unet3d::MaskKind::*;
    vec![
        CellSpec {
            name: "ast",
            attn: Ast,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::TempFstext,
            untrained: false,
        },
        CellSpec {
            name: "directed",
            attn: Directed,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::TempFstext,
            untrained: false,
        },
        CellSpec {
            name: "bidirectional",
            attn: Bidirectional,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::TempFstext,
            untrained: false,
        },
        CellSpec {
            name: "ast_random_init",
            attn: Ast,
            init_mode: InitMode::Random,
            finetune_set: FinetuneSet::TempFstext,
            untrained: false,
        },
        CellSpec {
            name: "ast_cross_temp_fstext",
            attn: Ast,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::CrossTempFstext,
            untrained: false,
        },
        CellSpec {
            name: "untrained",
            attn: Ast,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::TempFstext,
            untrained: true,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub compliance: f64,
    pub psnr: f64,
    pub clips: usize,
    pub refs_exact: bool,
}

#[derive(Clone, Debug, Default)]
pub struct AblateReport {
    pub results: Vec<CellResult>,
}

impl AblateReport {
    /// (mean, sd, count) of compliance for one cell across seeds.
    pub fn cell_stats(&self, cell: &str) -> Option<(f64, f64, usize)> {
        let vals: Vec<f64> =
            self.results.iter().filter(|r| r.cell == cell).map(|r| r.compliance).collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt(), vals.len()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,clips,compliance,psnr,refs_exact\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.3},{}\n",
                r.cell, r.seed, r.clips, r.compliance, r.psnr, r.refs_exact as u8
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut cells: Vec<String> = Vec::new();
        for r in &self.results {
            if !cells.contains(&r.cell) {
                cells.push(r.cell.clone());
            }
        }
        let mut out = String::from("cell,seeds,mean_compliance,sd_compliance\n");
        for cell in cells {
            if let Some((mean, sd, n)) = self.cell_stats(&cell) {
                out.push_str(&format!("{cell},{n},{mean:.4},{sd:.4}\n"));
            }
        }
        out
    }
}

/// Run the ablation matrix: stage A is shared per seed; each cell runs
/// inflate, init, fine-tune (unless untrained) and eval on the same val
/// subset. Identical pipeline code path per cell, differing only in the
/// three config axes.
pub fn ablate(
    data_dir: &Path,
    out_dir: &Path,
    base: &RunConfig,
    seeds: &[u64],
    cells: &[CellSpec],
    mut progress: impl FnMut(&str),
) -> Result<AblateReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut report = AblateReport::default();
    for &seed in seeds {
        let mut cfg_a = base.clone();
        cfg_a.seed = seed;
        progress(&format!("seed {seed}: stage A ({} steps)", cfg_a.stage_a_steps));
        let (ckpt2d, _) = stage_a_pretrain(data_dir, &cfg_a)?;
        save_checkpoint(&out_dir.join(format!("seed{seed}_2d.ckpt")), &ckpt2d)?;
        // identity init only touches fstext.* and is independent of the
        // attention kind, so its result is shared across cells per seed
        let mut fstext_cache: BTreeMap<&'static str, Vec<(String, Vec<f32>)>> = BTreeMap::new();
        for cell in cells {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.attn = cell.attn;
            cfg.init_mode = cell.init_mode;
            cfg.finetune_set = cell.finetune_set;
            progress(&format!("seed {seed}: cell {}", cell.name));
            let inflated = inflate_stage(&ckpt2d, &cfg)?;
            let inited = match fstext_cache.get(cell.init_mode.name()) {
                Some(params) => {
                    let ck = inflated.clone_all();
                    for (name, data) in params {
                        let dims = ck.store.get(name)?.dims().to_vec();
                        ck.store.set_frozen(name, false);
                        ck.store.update(name, dims, data.clone());
                    }
                    let mut config = cfg.to_map();
                    config.insert("meta.stage".into(), "3d-init".into());
                    config.insert("meta.init_mode".into(), cfg.init_mode.name().into());
                    ck.store
                        .freeze_except(|n| n.contains(".tattn") || n.starts_with("fstext."));
                    Checkpoint { config, vocab: ck.vocab, store: ck.store }
                }
                None => {
                    let ck = init_text_stage(&inflated, data_dir, &cfg)?;
                    let params: Vec<(String, Vec<f32>)> = ck
                        .store
                        .names()
                        .filter(|n| n.starts_with("fstext."))
                        .map(|n| (n.to_string(), ck.store.get(n).unwrap().data().to_vec()))
                        .collect();
                    fstext_cache.insert(cell.init_mode.name(), params);
                    ck
                }
            };
            let final_ckpt = if cell.untrained {
                inited
            } else {
                let (ck, _) = stage_d_finetune(&inited, data_dir, &cfg)?;
                ck
            };
            let eval = evaluate(&final_ckpt, data_dir, &cfg, false)?;
            let result = CellResult {
                cell: cell.name.to_string(),
                seed,
                compliance: eval.compliance_rate(),
                psnr: eval.mean_psnr(),
                clips: eval.rows.len(),
                refs_exact: eval.all_refs_exact(),
            };
            progress(&format!(
                "seed {seed}: cell {} -> compliance {:.3}, psnr {:.2}",
                cell.name, result.compliance, result.psnr
            ));
            report.results.push(result);
            save_checkpoint(&out_dir.join(format!("seed{seed}_{}.ckpt", cell.name)), &final_ckpt)?;
        }
        std::fs::write(out_dir.join("results.csv"), report.to_csv())?;
        std::fs::write(out_dir.join("summary.csv"), report.summary_csv())?;
    }
    Ok(report)
}
