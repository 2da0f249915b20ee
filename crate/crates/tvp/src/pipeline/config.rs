//! Run configuration: every stage and architecture knob as key=value
//! lines. CLI flags override file values; the effective config is echoed
//! into checkpoints and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::codec::LatentSpec;
use crate::error::{Error, Result};
use crate::fstext::FSTextConfig;
use crate::textstack::TextConfig;
use crate::unet3d::{MaskKind, UNetConfig};

/// Which parameter groups a fine-tuning run updates. The names map to
/// exact frozen-flag assignments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneSet {
    /// temporal attention only
    Temp,
    /// temporal + spatial-cross attention
    CrossTemp,
    /// temporal attention + instruction decomposer (the default)
    TempFstext,
    /// everything above at once
    CrossTempFstext,
}

impl FinetuneSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "temp" => Some(FinetuneSet::Temp),
            "cross+temp" => Some(FinetuneSet::CrossTemp),
            "temp+fstext" => Some(FinetuneSet::TempFstext),
            "cross+temp+fstext" => Some(FinetuneSet::CrossTempFstext),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FinetuneSet::Temp => "temp",
            FinetuneSet::CrossTemp => "cross+temp",
            FinetuneSet::TempFstext => "temp+fstext",
            FinetuneSet::CrossTempFstext => "cross+temp+fstext",
        }
    }

    /// Trainability predicate over parameter names.
    pub fn trainable(&self, name: &str) -> bool {
        let temp = name.contains(".tattn");
        let cross = name.contains(".xattn") && name.starts_with("unet.");
        let fstext = name.starts_with("fstext.");
        match self {
            FinetuneSet::Temp => temp,
            FinetuneSet::CrossTemp => temp || cross,
            FinetuneSet::TempFstext => temp || fstext,
            FinetuneSet::CrossTempFstext => temp || cross || fstext,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Identity,
    Random,
}

impl InitMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(InitMode::Identity),
            "random" => Some(InitMode::Random),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Identity => "identity",
            InitMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // geometry
    pub frames: usize,
    pub image_side: usize,
    pub patch: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub layers_per_block: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub fstext_depth: usize,
    pub fstext_heads: usize,
    // diffusion
    pub t_steps: usize,
    // stage budgets
    pub stage_a_steps: usize,
    pub stage_a_batch: usize,
    pub stage_a_lr: f64,
    pub identity_steps: usize,
    pub identity_batch: usize,
    pub identity_lr: f64,
    pub identity_tol: f64,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub grad_accum: usize,
    pub warmup_frac: f64,
    pub cond_dropout: f64,
    pub ref_frames: usize,
    // architecture axes
    pub attn: MaskKind,
    pub block_causal: bool,
    pub init_mode: InitMode,
    pub finetune_set: FinetuneSet,
    // sampling / eval
    pub sample_steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub eval_clips: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames: 8,
            image_side: 32,
            patch: 4,
            base_channels: 32,
            channel_mults: vec![1, 2],
            layers_per_block: 2,
            head_dim: 8,
            groups: 8,
            text_dim: 64,
            text_len: 8,
            text_layers: 2,
            text_heads: 4,
            fstext_depth: 4,
            fstext_heads: 4,
            t_steps: 1000,
            stage_a_steps: 20_000,
            stage_a_batch: 8,
            stage_a_lr: 1e-3,
            identity_steps: 2_000,
            identity_batch: 8,
            identity_lr: 3e-3,
            identity_tol: 1e-3,
            finetune_steps: 10_000,
            finetune_batch: 2,
            finetune_lr: 1e-3,
            grad_accum: 1,
            warmup_frac: 0.05,
            cond_dropout: 0.1,
            ref_frames: 2,
            attn: MaskKind::Ast,
            block_causal: false,
            init_mode: InitMode::Identity,
            finetune_set: FinetuneSet::TempFstext,
            sample_steps: 30,
            guidance: 2.0,
            eta: 0.0,
            eval_clips: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn latent_spec(&self) -> Result<LatentSpec> {
        LatentSpec::new(self.patch, self.image_side)
    }

    pub fn unet_config(&self) -> Result<UNetConfig> {
        let spec = self.latent_spec()?;
        let cfg = UNetConfig {
            in_channels: spec.channels(),
            base: self.base_channels,
            mults: self.channel_mults.clone(),
            layers_per_block: self.layers_per_block,
            head_dim: self.head_dim,
            text_dim: self.text_dim,
            text_len: self.text_len,
            latent_side: spec.latent_side(),
            frames: self.frames,
            groups: self.groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn text_config(&self) -> TextConfig {
        TextConfig {
            dim: self.text_dim,
            len: self.text_len,
            layers: self.text_layers,
            heads: self.text_heads,
        }
    }

    pub fn fstext_config(&self) -> FSTextConfig {
        FSTextConfig {
            frames: self.frames,
            tokens_per_frame: self.text_len,
            dim: self.text_dim,
            depth: self.fstext_depth,
            heads: self.fstext_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ref_frames == 0 || self.ref_frames >= self.frames {
            return Err(Error::Config(format!(
                "ref_frames {} must be in [1, {})",
                self.ref_frames, self.frames
            )));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_steps {
            return Err(Error::Config(format!(
                "sample_steps {} out of [1, {}]",
                self.sample_steps, self.t_steps
            )));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be >= 1".into()));
        }
        self.unet_config()?;
        Ok(())
    }

    /// Apply one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: '{v}' is not an integer")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
        };
        match key {
            "frames" => self.frames = parse_usize(value)?,
            "image_side" => self.image_side = parse_usize(value)?,
            "patch" => self.patch = parse_usize(value)?,
            "base_channels" => self.base_channels = parse_usize(value)?,
            "channel_mults" => {
                self.channel_mults = value
                    .split(',')
                    .map(|m| {
                        m.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("channel_mults: bad '{m}'")))
                    })
                    .collect::<Result<_>>()?;
            }
            "layers_per_block" => self.layers_per_block = parse_usize(value)?,
            "head_dim" => self.head_dim = parse_usize(value)?,
            "groups" => self.groups = parse_usize(value)?,
            "text_dim" => self.text_dim = parse_usize(value)?,
            "text_len" => self.text_len = parse_usize(value)?,
            "text_layers" => self.text_layers = parse_usize(value)?,
            "text_heads" => self.text_heads = parse_usize(value)?,
            "fstext_depth" => self.fstext_depth = parse_usize(value)?,
            "fstext_heads" => self.fstext_heads = parse_usize(value)?,
            "t_steps" => self.t_steps = parse_usize(value)?,
            "stage_a_steps" => self.stage_a_steps = parse_usize(value)?,
            "stage_a_batch" => self.stage_a_batch = parse_usize(value)?,
            "stage_a_lr" => self.stage_a_lr = parse_f64(value)?,
            "identity_steps" => self.identity_steps = parse_usize(value)?,
            "identity_batch" => self.identity_batch = parse_usize(value)?,
            "identity_lr" => self.identity_lr = parse_f64(value)?,
            "identity_tol" => self.identity_tol = parse_f64(value)?,
            "finetune_steps" => self.finetune_steps = parse_usize(value)?,
            "finetune_batch" => self.finetune_batch = parse_usize(value)?,
            "finetune_lr" => self.finetune_lr = parse_f64(value)?,
            "grad_accum" => self.grad_accum = parse_usize(value)?,
            "warmup_frac" => self.warmup_frac = parse_f64(value)?,
            "cond_dropout" => self.cond_dropout = parse_f64(value)?,
            "ref_frames" => self.ref_frames = parse_usize(value)?,
            "attn" => {
                self.attn = MaskKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("attn: unknown kind '{value}'")))?;
            }
            "block_causal" => {
                self.block_causal = value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("block_causal: '{value}'")))?;
            }
            "init_mode" => {
                self.init_mode = InitMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("init_mode: unknown '{value}'")))?;
            }
            "finetune_set" => {
                self.finetune_set = FinetuneSet::parse(value)
                    .ok_or_else(|| Error::Config(format!("finetune_set: unknown '{value}'")))?;
            }
            "sample_steps" => self.sample_steps = parse_usize(value)?,
            "guidance" => self.guidance = parse_f64(value)?,
            "eta" => self.eta = parse_f64(value)?,
            "eval_clips" => self.eval_clips = parse_usize(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("seed: '{value}'")))?;
            }
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse key=value lines; '#' starts a comment.
    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_lines(&text)?;
        Ok(cfg)
    }

    /// Every key, in stable order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mults = self
            .channel_mults
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("frames", self.frames.to_string());
        put("image_side", self.image_side.to_string());
        put("patch", self.patch.to_string());
        put("base_channels", self.base_channels.to_string());
        put("channel_mults", mults);
        put("layers_per_block", self.layers_per_block.to_string());
        put("head_dim", self.head_dim.to_string());
        put("groups", self.groups.to_string());
        put("text_dim", self.text_dim.to_string());
        put("text_len", self.text_len.to_string());
        put("text_layers", self.text_layers.to_string());
        put("text_heads", self.text_heads.to_string());
        put("fstext_depth", self.fstext_depth.to_string());
        put("fstext_heads", self.fstext_heads.to_string());
        put("t_steps", self.t_steps.to_string());
        put("stage_a_steps", self.stage_a_steps.to_string());
        put("stage_a_batch", self.stage_a_batch.to_string());
        put("stage_a_lr", format!("{}", self.stage_a_lr));
        put("identity_steps", self.identity_steps.to_string());
        put("identity_batch", self.identity_batch.to_string());
        put("identity_lr", format!("{}", self.identity_lr));
        put("identity_tol", format!("{}", self.identity_tol));
        put("finetune_steps", self.finetune_steps.to_string());
        put("finetune_batch", self.finetune_batch.to_string());
        put("finetune_lr", format!("{}", self.finetune_lr));
        put("grad_accum", self.grad_accum.to_string());
        put("warmup_frac", format!("{}", self.warmup_frac));
        put("cond_dropout", format!("{}", self.cond_dropout));
        put("ref_frames", self.ref_frames.to_string());
        put("attn", self.attn.name().to_string());
        put("block_causal", self.block_causal.to_string());
        put("init_mode", self.init_mode.name().to_string());
        put("finetune_set", self.finetune_set.name().to_string());
        put("sample_steps", self.sample_steps.to_string());
        put("guidance", format!("{}", self.guidance));
        put("eta", format!("{}", self.eta));
        put("eval_clips", self.eval_clips.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// Rebuild from a key map (checkpoint config block); keys outside the
    /// schema are ignored so checkpoints can carry `meta.*` entries.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            if k.starts_with("meta.") {
                continue;
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_map() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("attn", "directed").unwrap();
        cfg.set("finetune_set", "cross+temp").unwrap();
        cfg.set("channel_mults", "1,2,4").unwrap();
        cfg.set("guidance", "7.5").unwrap();
        let text = cfg.to_string();
        let mut back = RunConfig::default();
        back.apply_lines(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_lines("no_such_key=1").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn finetune_sets_map_to_flags() {
        let cases = [
            (FinetuneSet::Temp, true, false, false),
            (FinetuneSet::CrossTemp, true, true, false),
            (FinetuneSet::TempFstext, true, false, true),
            (FinetuneSet::CrossTempFstext, true, true, true),
        ];
        for (set, temp, cross, fs) in cases {
            assert_eq!(set.trainable("unet.down0.tattn0.q.w"), temp, "{set:?}");
            assert_eq!(set.trainable("unet.mid.xattn.k.w"), cross, "{set:?}");
            assert_eq!(set.trainable("fstext.tokens"), fs, "{set:?}");
            assert!(!set.trainable("unet.down0.res0.conv1.w"), "{set:?}");
            assert!(!set.trainable("text.embed.w"), "{set:?}");
            assert!(!set.trainable("unet.down0.sattn0.q.w"), "{set:?}");
        }
    }

    #[test]
    fn ref_frames_must_leave_frames_to_predict() {
        let mut cfg = RunConfig::default();
        cfg.ref_frames = 8;
        assert!(cfg.validate().is_err());
        cfg.ref_frames = 2;
        assert!(cfg.validate().is_ok());
    }
}
