//! Run configuration: one TOML document with sections
//! `backbone`, `hsn`, `bridge`, `train`, `data` and `toggles`.
//!
//! Every field has a default, and [`RunConfig::default`] serialises to a
//! complete document, so `hst print-config` shows every knob.
//! Unknown keys are rejected with their dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HstError, Result};

/// Plain ViT backbone geometry plus the meta-token count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub use_cls_token: bool,
    pub num_meta_tokens: usize,
    /// Std of the truncated-normal initialiser for frozen weights and meta tokens.
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            mlp_ratio: 4,
            use_cls_token: false,
            num_meta_tokens: 1,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    /// Patch grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length seen by every block: meta tokens, optional class token, patches.
    pub fn seq_len(&self) -> usize {
        self.num_meta_tokens + usize::from(self.use_cls_token) + self.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HstError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "backbone.image_size {} must be a positive multiple of backbone.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(4) {
            return bad(format!(
                "backbone.depth {} must be a positive multiple of 4",
                self.depth
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "backbone.embed_dim {} must be divisible by backbone.num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("backbone.mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("backbone.ln_eps must be positive and backbone.init_std non-negative".into());
        }
        Ok(())
    }
}

/// Hierarchical side network widths and block settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsnConfig {
    pub stage_dims: [usize; 4],
    /// Width of the first stem convolution.
    pub stem_channels: usize,
    pub ffn_ratio: usize,
    pub attn_heads: usize,
    /// Softmax over the meta-global keys; `false` selects the bilinear
    /// (unnormalised) attention variant.
    pub attention_softmax: bool,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for HsnConfig {
    fn default() -> Self {
        Self {
            stage_dims: [16, 32, 64, 128],
            stem_channels: 8,
            ffn_ratio: 4,
            attn_heads: 1,
            attention_softmax: true,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl HsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.contains(&0) || self.stem_channels == 0 || self.ffn_ratio == 0 {
            return Err(HstError::config("hsn widths and ratios must be positive"));
        }
        if self.attn_heads == 0 || self.stage_dims.iter().any(|d| d % self.attn_heads != 0) {
            return Err(HstError::config(format!(
                "hsn.stage_dims {:?} must all be divisible by hsn.attn_heads {}",
                self.stage_dims, self.attn_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Stage projections carry a bias term.
    pub bias: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { bias: true }
    }
}

/// Component switches, one per ablation column plus the side network itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ln_tuning: bool,
    pub weight_sharing: bool,
    pub global_t: bool,
    pub fg_injection: bool,
    /// `false` drops the side network and bridge: the head reads mean-pooled
    /// final backbone tokens (linear probing).
    pub side_network: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            ln_tuning: true,
            weight_sharing: true,
            global_t: true,
            fg_injection: true,
            side_network: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Master seed: parameter init, data generation and shuffling.
    pub seed: u64,
    pub cosine_decay: bool,
    /// Write `ckpt-<step>.hstc` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            cosine_decay: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(HstError::config("train.learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HstError::config("train.weight_decay must be >= 0 and betas in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || self.batch_size == 0 {
            return Err(HstError::config("train.adam_eps and train.batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    /// Dataset file for training; empty means generate synthetically.
    pub train_path: String,
    pub test_path: String,
    /// Per-channel normalisation applied by the model to `[0, 1]` images.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            test_per_class: 20,
            noise_std: 0.1,
            train_path: String::new(),
            test_path: String::new(),
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

/// The full run document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: ViTConfig,
    pub hsn: HsnConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub toggles: Toggles,
}

/// The architecture-defining subset of a [`RunConfig`]; its hash is
/// recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: ViTConfig,
    pub hsn: HsnConfig,
    pub bridge: BridgeConfig,
    pub toggles: Toggles,
    pub num_classes: usize,
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        RunConfig::default().model()
    }
}

impl ModelConfig {
    /// Number of Side blocks per stage.
    pub fn blocks_per_stage(&self) -> usize {
        self.backbone.depth / 4
    }

    /// Key/value length of every Side block's cross-attention.
    pub fn meta_global_len(&self) -> usize {
        self.backbone.num_meta_tokens + usize::from(self.toggles.global_t)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hsn.validate()?;
        if self.num_classes < 2 {
            return Err(HstError::config("data.num_classes must be at least 2"));
        }
        if self.input_std.iter().any(|&s| !(s > 0.0)) {
            return Err(HstError::config("data.std entries must be positive"));
        }
        if self.toggles.side_network {
            if !self.backbone.image_size.is_multiple_of(32) {
                return Err(HstError::config(format!(
                    "backbone.image_size {} must be a multiple of 32 for the stride-32 stage",
                    self.backbone.image_size
                )));
            }
            if self.meta_global_len() == 0 {
                return Err(HstError::config(
                    "cross-attention has no keys: set backbone.num_meta_tokens >= 1 or enable toggles.global_t",
                ));
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest of the architecture.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("model config serialises");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            hsn: self.hsn.clone(),
            bridge: self.bridge.clone(),
            toggles: self.toggles.clone(),
            num_classes: self.data.num_classes,
            input_mean: self.data.mean,
            input_std: self.data.std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HstError::config(e.to_string().trim_end().to_string()))?;
        let reference = toml::Table::try_from(RunConfig::default()).expect("default config serialises");
        if let Some(path) = first_unknown_key(&doc, &reference, "") {
            let line = find_key_line(text, &path);
            return Err(HstError::config(match line {
                Some(l) => format!("unknown key `{path}` (line {l})"),
                None => format!("unknown key `{path}`"),
            }));
        }
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HstError::config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            HstError::Config(m) => HstError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

fn first_unknown_key(doc: &toml::Table, reference: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in doc {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match reference.get(key) {
            None => return Some(path),
            Some(toml::Value::Table(sub_ref)) => {
                if let toml::Value::Table(sub) = value {
                    if let Some(p) = first_unknown_key(sub, sub_ref, &path) {
                        return Some(p);
                    }
                }
            }
            Some(_) => {}
        }
    }
    None
}

/// 1-based line of a dotted key's last component, searched inside its section.
fn find_key_line(text: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, path),
    };
    let mut in_section = section.is_none();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            in_section = section.is_some_and(|s| l.trim_matches(|c| c == '[' || c == ']').trim() == s);
            if section.is_none() && l.trim_matches(|c| c == '[' || c == ']').trim() == key {
                return Some(i + 1);
            }
            continue;
        }
        if in_section && l.split('=').next().is_some_and(|k| k.trim() == key) {
            return Some(i + 1);
        }
    }
    None
}
