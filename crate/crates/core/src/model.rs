//! Full HST assembly: backbone taps feed the bridge, the bridge feeds the
//! side network, and a linear head reads the globally pooled stride-32 map.
//!
//! With `toggles.side_network = false` the bridge and side network are
//! dropped and the head reads mean-pooled final backbone tokens instead.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, META_TOKENS};
use crate::bridge::{Bridge, BridgeOutput, STAGES};
use crate::config::ModelConfig;
use crate::error::{HstError, Result};
use crate::layers::Linear;
use crate::param::{Initializer, ParamKind, ParamSink, ParamSpec, ParamStore, SpecList};
use crate::side_net::SideNet;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Module structure without parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    pub bridge: Option<Bridge>,
    pub side: Option<SideNet>,
    pub head: Linear,
}

impl Architecture {
    pub fn declare(cfg: &ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::declare(&cfg.backbone, cfg.toggles.ln_tuning, sink)?;
        let (bridge, side, head_in) = if cfg.toggles.side_network {
            let bridge = Bridge::declare(cfg, sink)?;
            let side = SideNet::declare(cfg, sink)?;
            (Some(bridge), Some(side), cfg.hsn.stage_dims[STAGES - 1])
        } else {
            (None, None, cfg.backbone.embed_dim)
        };
        let head = Linear::declare(sink, "head", head_in, cfg.num_classes, true, true, cfg.hsn.init_std)?;
        Ok(Self {
            backbone,
            bridge,
            side,
            head,
        })
    }
}

/// Every parameter declaration of a configuration, without allocating values.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let mut specs = SpecList::default();
    Architecture::declare(cfg, &mut specs)?;
    Ok(specs.specs)
}

/// Trainable and frozen scalar counts, by component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub backbone_ln: usize,
    pub meta_tokens: usize,
    pub bridge: usize,
    pub side_network: usize,
    pub head: usize,
    pub total_trainable: usize,
    pub total_frozen: usize,
}

impl ParamReport {
    pub fn from_specs<'a>(specs: impl IntoIterator<Item = (&'a str, ParamKind, bool, usize)>) -> Self {
        let mut r = Self::default();
        for (name, kind, trainable, n) in specs {
            if !trainable {
                r.total_frozen += n;
                continue;
            }
            r.total_trainable += n;
            let slot = if name == META_TOKENS {
                &mut r.meta_tokens
            } else if name.starts_with("backbone.") && kind == ParamKind::Norm {
                &mut r.backbone_ln
            } else if name.starts_with("bridge.") {
                &mut r.bridge
            } else if name.starts_with("side.") {
                &mut r.side_network
            } else if name.starts_with("head.") {
                &mut r.head
            } else {
                continue;
            };
            *slot += n;
        }
        r
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        let specs = param_specs(cfg)?;
        Ok(Self::from_specs(
            specs.iter().map(|s| (s.name.as_str(), s.kind, s.trainable, s.numel())),
        ))
    }

    pub fn total(&self) -> usize {
        self.total_trainable + self.total_frozen
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.total_trainable as f64 / self.total().max(1) as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "backbone_ln={}", self.backbone_ln)?;
        writeln!(f, "meta_tokens={}", self.meta_tokens)?;
        writeln!(f, "bridge={}", self.bridge)?;
        writeln!(f, "side_network={}", self.side_network)?;
        writeln!(f, "head={}", self.head)?;
        writeln!(f, "total_trainable={}", self.total_trainable)?;
        writeln!(f, "total_frozen={}", self.total_frozen)?;
        write!(f, "trainable_fraction={:.6}", self.trainable_fraction())
    }
}

/// The four pyramid maps, strides 4, 8, 16 and 32.
pub type Pyramid<T> = [Tensor<T>; STAGES];

#[derive(Clone, Debug)]
pub struct HstModel<T: Element> {
    cfg: ModelConfig,
    arch: Architecture,
    params: ParamStore<T>,
}

impl<T: Element> HstModel<T> {
    /// Builds and initialises a model; every random draw comes from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::declare(
            cfg,
            &mut Initializer {
                store: &mut params,
                rng: &mut rng,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model at another precision.
    pub fn cast<U: Element>(&self) -> HstModel<U> {
        HstModel {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Re-applies the freeze policy and returns the sorted trainable manifest.
    pub fn apply_freeze_policy(&mut self) -> Vec<String> {
        self.arch
            .backbone
            .set_freeze_policy(&mut self.params, self.cfg.toggles.ln_tuning);
        self.params.trainable_names()
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_specs(
            self.params
                .iter()
                .map(|(_, p)| (p.name(), p.kind(), p.trainable(), p.numel())),
        )
    }

    /// Applies the configured per-channel normalisation to `[B, 3, H, W]` images in `[0, 1]`.
    pub fn normalize(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(HstError::dimension(format!("expected images [B, 3, H, W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let (mean, std) = (self.cfg.input_mean, self.cfg.input_std);
        let data = images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % 3;
                T::cast((v.as_f64() - mean[c]) / std[c])
            })
            .collect();
        Tensor::new(s.to_vec(), data)
    }

    fn feeds(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<BridgeOutput>> {
        let out = g.scoped("backbone", |g| self.arch.backbone.forward(g, store, image))?;
        let bridge = self.arch.bridge.as_ref().expect("side network present");
        g.scoped("bridge", |g| {
            out.taps
                .iter()
                .enumerate()
                .map(|(i, &tap)| bridge.afb(g, store, tap, i))
                .collect()
        })
    }

    /// Records the pyramid forward on `g` for already-normalised images.
    pub fn pyramid_graph(&self, g: &mut Graph<T>, image: Var) -> Result<[Var; STAGES]> {
        self.pyramid_graph_with(g, &self.params, image)
    }

    /// As [`Self::pyramid_graph`], reading parameter values from `store`.
    pub fn pyramid_graph_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<[Var; STAGES]> {
        let side = self
            .arch
            .side
            .as_ref()
            .ok_or_else(|| HstError::config("toggles.side_network is off: this model has no feature pyramid"))?;
        let feeds = self.feeds(g, store, image)?;
        side.forward(g, store, image, &feeds)
    }

    /// Records the classification forward on `g` for already-normalised images.
    pub fn logits_graph(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        self.logits_graph_with(g, &self.params, image)
    }

    /// As [`Self::logits_graph`], reading parameter values from `store`.
    pub fn logits_graph_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let pooled = if self.arch.side.is_some() {
            let maps = self.pyramid_graph_with(g, store, image)?;
            let p32 = maps[STAGES - 1];
            let s = g.shape(p32).to_vec();
            g.scoped("head", |g| -> Result<Var> {
                let flat = g.reshape(p32, &[s[0], s[1], s[2] * s[3]])?;
                g.mean_axis(flat, 2)
            })?
        } else {
            let out = g.scoped("backbone", |g| self.arch.backbone.forward(g, store, image))?;
            g.scoped("head", |g| g.mean_axis(out.final_patches, 1))?
        };
        g.scoped("head", |g| self.arch.head.apply(g, store, pooled))
    }

    /// Logits `[B, num_classes]` for raw `[0, 1]` images.
    pub fn forward_classify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(self.normalize(images)?);
        let y = self.logits_graph(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Feature pyramid for raw `[0, 1]` images.
    pub fn forward_pyramid(&self, images: &Tensor<T>) -> Result<Pyramid<T>> {
        let mut g = Graph::inference();
        let x = g.constant(self.normalize(images)?);
        let maps = self.pyramid_graph(&mut g, x)?;
        Ok(maps.map(|m| g.value(m).clone()))
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward_classify(images)?;
        Ok(logits.data().chunks(self.cfg.num_classes).map(argmax).collect())
    }
}

/// Index of the first maximum.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
