//! Frozen plain ViT with meta tokens and LayerNorm tuning.
//!
//! Sequence layout entering every block is `[meta ‖ cls? ‖ patches]`. Meta
//! tokens bypass the positional table and take part in ordinary softmax
//! self-attention. After each block's second residual the output is split
//! into its meta part and its patch part; the class token, if present, is in
//! neither.

use crate::config::ViTConfig;
use crate::error::{HstError, Result};
use crate::layers::{Linear, Norm};
use crate::param::{Init, ParamId, ParamKind, ParamSink, ParamSpec, ParamStore};
use crate::tensor::{Element, Graph, Var};

const PREFIX: &str = "backbone";
pub const META_TOKENS: &str = "backbone.meta_tokens";

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// One block's harvested output.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    /// `[B, N, d_vit]`; empty along axis 1 when there are no meta tokens.
    pub meta: Var,
    /// `[B, g², d_vit]`.
    pub patch: Var,
}

/// Result of a backbone forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Exactly one tap per block, in block order.
    pub taps: Vec<Tap>,
    /// Final-LayerNorm patch tokens `[B, g², d_vit]`.
    pub final_patches: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: ViTConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: Option<ParamId>,
    meta: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Norm,
}

impl Backbone {
    /// Declares every backbone parameter. Frozen weights are truncated-normal,
    /// LayerNorms start at identity, and the freeze policy is applied up front.
    pub fn declare(cfg: &ViTConfig, ln_tuning: bool, sink: &mut dyn ParamSink) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let std = cfg.init_std;
        let frozen =
            |name: String, shape: Vec<usize>, kind| ParamSpec::new(name, shape, kind, false, Init::TruncNormal(std));
        let patch_w = sink.declare(frozen(
            format!("{PREFIX}.patch_embed.weight"),
            vec![d, 3, p, p],
            ParamKind::Weight,
        ))?;
        let patch_b = sink.declare(ParamSpec::new(
            format!("{PREFIX}.patch_embed.bias"),
            [d],
            ParamKind::Bias,
            false,
            Init::Zeros,
        ))?;
        let pos_len = cfg.num_patches() + usize::from(cfg.use_cls_token);
        let pos = sink.declare(frozen(
            format!("{PREFIX}.pos_embed"),
            vec![pos_len, d],
            ParamKind::Token,
        ))?;
        let cls = if cfg.use_cls_token {
            Some(sink.declare(frozen(format!("{PREFIX}.cls_token"), vec![1, d], ParamKind::Token))?)
        } else {
            None
        };
        let meta = if cfg.num_meta_tokens > 0 {
            Some(sink.declare(ParamSpec::new(
                META_TOKENS,
                [cfg.num_meta_tokens, d],
                ParamKind::Token,
                true,
                Init::TruncNormal(std),
            ))?)
        } else {
            None
        };
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("{PREFIX}.block{i}");
            blocks.push(Block {
                ln1: Norm::declare(sink, &format!("{name}.ln1"), d, ln_tuning)?,
                qkv: Linear::declare(sink, &format!("{name}.attn.qkv"), d, 3 * d, true, false, std)?,
                proj: Linear::declare(sink, &format!("{name}.attn.proj"), d, d, true, false, std)?,
                ln2: Norm::declare(sink, &format!("{name}.ln2"), d, ln_tuning)?,
                fc1: Linear::declare(sink, &format!("{name}.mlp.fc1"), d, hidden, true, false, std)?,
                fc2: Linear::declare(sink, &format!("{name}.mlp.fc2"), hidden, d, true, false, std)?,
            });
        }
        let norm = Norm::declare(sink, &format!("{PREFIX}.norm"), d, ln_tuning)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            cls,
            meta,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn meta_tokens(&self) -> Option<ParamId> {
        self.meta
    }

    fn norms(&self) -> impl Iterator<Item = Norm> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| [b.ln1, b.ln2])
            .chain(std::iter::once(self.norm))
    }

    /// Re-applies the freeze partition: exactly the LayerNorm parameters (when
    /// `ln_tuning`) and the meta tokens are trainable. Returns the sorted
    /// names of the trainable backbone parameters.
    pub fn set_freeze_policy<T: Element>(&self, store: &mut ParamStore<T>, ln_tuning: bool) -> Vec<String> {
        let norm_ids: Vec<ParamId> = self.norms().flat_map(|n| [n.gamma, n.beta]).collect();
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name().starts_with("backbone."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let trainable = Some(id) == self.meta || (ln_tuning && norm_ids.contains(&id));
            store.set_trainable(id, trainable);
        }
        let mut names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable() && p.name().starts_with("backbone."))
            .map(|(_, p)| p.name().to_string())
            .collect();
        names.sort();
        names
    }

    /// `[B, 3, H, W]` image to `[B, g², d]` patch tokens with positions added.
    /// With a class token the result is `[B, 1 + g², d]`.
    pub fn patch_embed<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(HstError::dimension(format!(
                "backbone expects images [B, 3, {size}, {size}], got {s:?}"
            )));
        }
        let (b, d, n) = (s[0], self.cfg.embed_dim, self.cfg.num_patches());
        let w = g.param(store, self.patch_w);
        let bias = g.param(store, self.patch_b);
        let x = g.conv2d(image, w, Some(bias), self.cfg.patch_size, 0)?;
        let x = g.reshape(x, &[b, d, n])?;
        let mut x = g.permute(x, &[0, 2, 1])?;
        if let Some(cls) = self.cls {
            let c = g.param(store, cls);
            let c = g.expand_leading(c, b);
            x = g.concat(&[c, x], 1)?;
        }
        let pos = g.param(store, self.pos);
        g.add_suffix(x, pos)
    }

    /// Full forward pass, harvesting one [`Tap`] per block.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<BackboneOutput> {
        let b = g.shape(image).first().copied().unwrap_or(0);
        let mut x = self.patch_embed(g, store, image)?;
        let n_meta = self.cfg.num_meta_tokens;
        if let Some(meta) = self.meta {
            let m = g.param(store, meta);
            let m = g.expand_leading(m, b);
            x = g.concat(&[m, x], 1)?;
        }
        let patch_start = n_meta + usize::from(self.cfg.use_cls_token);
        let n_patch = self.cfg.num_patches();
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = self.block_forward(g, store, block, x)?;
            taps.push(Tap {
                meta: g.slice(x, 1, 0, n_meta)?,
                patch: g.slice(x, 1, patch_start, n_patch)?,
            });
        }
        let normed = self.norm.apply(g, store, x, self.cfg.ln_eps)?;
        let final_patches = g.slice(normed, 1, patch_start, n_patch)?;
        Ok(BackboneOutput { taps, final_patches })
    }

    fn block_forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, block: &Block, x: Var) -> Result<Var> {
        let eps = self.cfg.ln_eps;
        let h = block.ln1.apply(g, store, x, eps)?;
        let a = self_attention(g, store, &block.qkv, &block.proj, h, self.cfg.num_heads)?;
        let x = g.add(x, a)?;
        let h = block.ln2.apply(g, store, x, eps)?;
        let h = block.fc1.apply(g, store, h)?;
        let h = g.gelu(h);
        let h = block.fc2.apply(g, store, h)?;
        g.add(x, h)
    }
}

/// Multi-head softmax self-attention over every token of `x: [B, T, d]`.
pub(crate) fn self_attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    qkv: &Linear,
    proj: &Linear,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let y = qkv.apply(g, store, x)?;
    let y = g.reshape(y, &[b, t, 3, heads, dh])?;
    let y = g.permute(y, &[2, 0, 3, 1, 4])?; // [3, B, heads, T, dh]
    let part = |g: &mut Graph<T>, i: usize| -> Result<Var> {
        let p = g.slice(y, 0, i, 1)?;
        g.reshape(p, &[b, heads, t, dh])
    };
    let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.scale(scores, T::cast(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax(scores, 3)?;
    let o = g.matmul(attn, v, false, false)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, t, d])?;
    proj.apply(g, store, o)
}
