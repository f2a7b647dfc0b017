//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{LossConfig, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Hard-negative margin of the contrastive loss.
    pub alpha: f64,
    /// Structure modules on the last `sil_layer_count` layers.
    pub sil_layer_count: usize,
    pub mfb_enabled: bool,
    pub contrastive_enabled: bool,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub gcn_hidden: usize,
    pub share_gcn: bool,
    pub ln_eps: f64,
    /// Test-set evaluation period in steps; the final step is always evaluated.
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.01,
            momentum: 0.9,
            total_steps: 3000,
            warmup_steps: 150,
            batch_size: 16,
            alpha: 0.3,
            sil_layer_count: 3,
            mfb_enabled: true,
            contrastive_enabled: true,
            seed: 0,
            image_size: 64,
            patch_size: 16,
            stride: 16,
            depth: 4,
            width: 64,
            heads: 4,
            ffn_width: 256,
            gcn_hidden: 64,
            share_gcn: false,
            ln_eps: 1e-6,
            eval_every: 500,
            eval_batch: 100,
        }
    }
}

/// Recipe used for the full-size CUB-200-2011 runs, kept for reference.
pub fn reference_recipe() -> TrainConfig {
    TrainConfig {
        lr_init: 3e-2,
        total_steps: 10_000,
        warmup_steps: 500,
        batch_size: 5,
        image_size: 448,
        patch_size: 16,
        stride: 12,
        depth: 12,
        width: 768,
        heads: 12,
        ffn_width: 3072,
        gcn_hidden: 768,
        ..TrainConfig::default()
    }
}

/// The four rows of the component ablation, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    WithSil,
    WithSilMfbNoCl,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::WithSil, Ablation::WithSilMfbNoCl, Ablation::Full];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::WithSil => "Baseline + SIL",
            Ablation::WithSilMfbNoCl => "Baseline + SIL + MFB_without_CL",
            Ablation::Full => "Baseline + SIL + MFB",
        }
    }

    /// `base` with the component switches of this row.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (sil, mfb, cl) = match self {
            Ablation::Baseline => (0, false, false),
            Ablation::WithSil => (1, false, false),
            Ablation::WithSilMfbNoCl => (3, true, false),
            Ablation::Full => (3, true, true),
        };
        TrainConfig {
            sil_layer_count: sil,
            mfb_enabled: mfb,
            contrastive_enabled: cl,
            ..base.clone()
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.sil_layer_count > self.depth {
            return Err(Error::Config(format!(
                "sil_layer_count {} exceeds depth {}",
                self.sil_layer_count, self.depth
            )));
        }
        if self.contrastive_enabled && self.batch_size < 2 {
            return Err(Error::Config("contrastive loss needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch sizes and eval_every must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr_init must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.image_size, self.patch_size, self.stride)
    }

    pub fn model(&self, classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                grid: self.grid()?,
                width: self.width,
                heads: self.heads,
                ffn_width: self.ffn_width,
                depth: self.depth,
                ln_eps: self.ln_eps,
            },
            classes,
            sil_layers: ModelConfig::last_layers(self.depth, self.sil_layer_count),
            mfb: self.mfb_enabled,
            gcn_hidden: self.gcn_hidden,
            share_gcn: self.share_gcn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            contrastive: self.contrastive_enabled,
            alpha: self.alpha,
        }
    }

    /// One `key = value` line per field, in a fixed order. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_init", self.lr_init.to_string()),
            ("momentum", self.momentum.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("sil_layer_count", self.sil_layer_count.to_string()),
            ("mfb_enabled", self.mfb_enabled.to_string()),
            ("contrastive_enabled", self.contrastive_enabled.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("stride", self.stride.to_string()),
            ("depth", self.depth.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_width", self.ffn_width.to_string()),
            ("gcn_hidden", self.gcn_hidden.to_string()),
            ("share_gcn", self.share_gcn.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
        ]
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr_init" => self.lr_init = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "sil_layer_count" => self.sil_layer_count = parse(key, value)?,
            "mfb_enabled" => self.mfb_enabled = parse_bool(key, value)?,
            "contrastive_enabled" => self.contrastive_enabled = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_width" => self.ffn_width = parse(key, value)?,
            "gcn_hidden" => self.gcn_hidden = parse(key, value)?,
            "share_gcn" => self.share_gcn = parse_bool(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
