//! Model, training, and run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffconv::DiffConvKind;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input image side, pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Transformer block count.
    pub depth: usize,
    /// Token embedding width D.
    pub embed_dim: usize,
    /// Attention hidden width; equals `embed_dim` in all presets.
    pub hidden_dim: usize,
    pub heads: usize,
    /// Adapter bottleneck channels d_mid.
    pub adapter_mid_channels: usize,
    /// One LoRA expert per rank; ranks must be pairwise distinct.
    pub lora_ranks: Vec<usize>,
    /// One adapter expert per kind; kinds must be pairwise distinct.
    pub adapter_kinds: Vec<DiffConvKind>,
    pub top_k: usize,
    pub lambda_moe: f64,
    /// Weight-initialization seed.
    pub seed: u64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Desk-scale preset: trains on one CPU in minutes.
    pub fn desk(seed: u64) -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            embed_dim: 64,
            hidden_dim: 64,
            heads: 4,
            adapter_mid_channels: 16,
            lora_ranks: vec![2, 4, 8, 16],
            adapter_kinds: DiffConvKind::ALL.to_vec(),
            top_k: 1,
            lambda_moe: 1.0,
            seed,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// Tiny 1-block preset for gradient checks and oracles.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            depth: 1,
            embed_dim: 16,
            hidden_dim: 16,
            heads: 2,
            adapter_mid_channels: 4,
            lora_ranks: vec![1, 2],
            adapter_kinds: DiffConvKind::ALL.to_vec(),
            top_k: 1,
            lambda_moe: 1.0,
            seed,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// ViT-Base-shaped preset (12 blocks, width 768). Not exercised in CI.
    pub fn full_scale(seed: u64) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            embed_dim: 768,
            hidden_dim: 768,
            heads: 12,
            adapter_mid_channels: 192,
            lora_ranks: vec![8, 16, 32, 48, 64, 96, 128],
            adapter_kinds: DiffConvKind::ALL.to_vec(),
            top_k: 1,
            lambda_moe: 1.0,
            seed,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} must divide into {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1".to_string()));
        }
        let min_dd = self.embed_dim.min(self.hidden_dim);
        if self.lora_ranks.is_empty() {
            return Err(Error::config("at least one LoRA rank required".to_string()));
        }
        for (i, &r) in self.lora_ranks.iter().enumerate() {
            if r == 0 || r >= min_dd {
                return Err(Error::config(format!(
                    "LoRA rank {r} must satisfy 0 < r < min(D, dim) = {min_dd}"
                )));
            }
            if self.lora_ranks[..i].contains(&r) {
                return Err(Error::config(format!("duplicate LoRA rank {r}")));
            }
        }
        for (i, &k) in self.adapter_kinds.iter().enumerate() {
            if self.adapter_kinds[..i].contains(&k) {
                return Err(Error::config(format!("duplicate adapter kind {}", k.name())));
            }
        }
        if self.adapter_kinds.is_empty() {
            return Err(Error::config("at least one adapter kind required".to_string()));
        }
        if self.adapter_mid_channels == 0 {
            return Err(Error::config("adapter_mid_channels must be positive".to_string()));
        }
        if self.top_k == 0
            || self.top_k > self.lora_ranks.len()
            || self.top_k > self.adapter_kinds.len()
        {
            return Err(Error::config(format!(
                "top_k {} out of range for {} LoRA / {} adapter experts",
                self.top_k,
                self.lora_ranks.len(),
                self.adapter_kinds.len()
            )));
        }
        if self.lambda_moe < 0.0 {
            return Err(Error::config("lambda_moe must be nonnegative".to_string()));
        }
        // the adapter's spatial reshape needs a square patch grid, which a
        // square image with square patches always yields
        Ok(())
    }

    /// Patch grid side: image_size / patch_size.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Data-shuffling and gate-noise seed (independent of the model seed).
    pub seed: u64,
    #[serde(default = "default_lr_gate")]
    pub lr_gate: f64,
    #[serde(default = "default_lr_head")]
    pub lr_head: f64,
    #[serde(default = "default_lr_other")]
    pub lr_other: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Write a checkpoint every this many epochs; 0 disables intermediate
    /// checkpoints (the final one is always written).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_lr_gate() -> f64 {
    1e-3
}
fn default_lr_head() -> f64 {
    3e-2
}
fn default_lr_other() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed,
            lr_gate: default_lr_gate(),
            lr_head: default_lr_head(),
            lr_other: default_lr_other(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive".to_string()));
        }
        if self.lr_gate <= 0.0 || self.lr_head <= 0.0 || self.lr_other <= 0.0 {
            return Err(Error::config("learning rates must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Which expert pathway the model runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Noisy Top-k routing (the default).
    Moe,
    /// Sum all experts unweighted, no gate.
    MultiExperts,
    /// Route every sample to one fixed expert index in both layer types.
    SingleExpert(usize),
    /// No expert paths at all; only the classification head trains.
    BackboneOnly,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(RunMode::Moe),
            "multi_experts" => Ok(RunMode::MultiExperts),
            "backbone_only" => Ok(RunMode::BackboneOnly),
            other => {
                if let Some(id) = other.strip_prefix("single_expert:") {
                    let id = id
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad expert id in `{other}`")))?;
                    Ok(RunMode::SingleExpert(id))
                } else {
                    Err(Error::config(format!("unknown mode `{other}`")))
                }
            }
        }
    }

    pub fn uses_gates(self) -> bool {
        matches!(self, RunMode::Moe)
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Moe => write!(f, "moe"),
            RunMode::MultiExperts => write!(f, "multi_experts"),
            RunMode::SingleExpert(i) => write!(f, "single_expert:{i}"),
            RunMode::BackboneOnly => write!(f, "backbone_only"),
        }
    }
}

/// Full run description: what the CLI consumes and the checkpoint snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "moe".to_string()
}

impl RunConfig {
    pub fn validate(&self) -> Result<RunMode> {
        self.model.validate()?;
        self.train.validate()?;
        let mode = RunMode::parse(&self.mode)?;
        if let RunMode::SingleExpert(id) = mode {
            if id >= self.model.lora_ranks.len() || id >= self.model.adapter_kinds.len() {
                return Err(Error::config(format!(
                    "single_expert:{id} out of range for {} LoRA / {} adapter experts",
                    self.model.lora_ranks.len(),
                    self.model.adapter_kinds.len()
                )));
            }
        }
        Ok(mode)
    }
}
