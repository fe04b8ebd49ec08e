//! Hierarchical side network.
//!
//! A stride-4 convolutional stem feeds four stages of Side blocks, one block
//! per backbone block, with 2×2 stride-2 convolutions between stages. Inside
//! a stage the feature map travels as row-major tokens `[B, H·W, d_j]`; the
//! pyramid is emitted as `[B, d_j, H_j, W_j]`.

use crate::bridge::{stage_of_block, BridgeOutput, STAGES};
use crate::config::ModelConfig;
use crate::error::{HstError, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::param::{ParamSink, ParamStore};
use crate::tensor::{Element, Graph, Var};

/// `[B, C, H, W]` to `[B, H·W, C]`.
pub fn nchw_to_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// `[B, H·W, C]` to `[B, C, H, W]`.
pub fn tokens_to_nchw<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(HstError::dimension(format!(
            "cannot lay out tokens {s:?} as a {h}x{w} map"
        )));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// Splits `[B, L, d]` into `[B, heads, L, d/heads]`.
fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(y, &[0, 2, 1, 3])
}

fn merge_heads<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(y, &[s[0], s[2], s[1] * s[3]])
}

/// Attention of `q: [B, H, Lq, dh]` over `k, v: [B, H, M, dh]`.
///
/// With `softmax` the scores `q·kᵀ/√dh` are normalised over the `M` keys and
/// applied to `v`; both products cost `Lq·M·dh`. Without it the product is
/// regrouped as `q·(kᵀ·v)/√dh`.
pub fn attention_core<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var, softmax: bool) -> Result<Var> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    if softmax {
        let s = g.matmul(q, k, false, true)?;
        let s = g.scale(s, scale);
        let axis = g.shape(s).len() - 1;
        let a = g.softmax(s, axis)?;
        g.matmul(a, v, false, false)
    } else {
        let kv = g.matmul(k, v, true, false)?;
        let kv = g.scale(kv, scale);
        g.matmul(q, kv, false, false)
    }
}

#[derive(Clone, Debug)]
pub struct SideBlock {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    dim: usize,
    heads: usize,
    softmax: bool,
    fg_injection: bool,
    eps: f64,
}

impl SideBlock {
    pub fn declare(cfg: &ModelConfig, name: &str, dim: usize, sink: &mut dyn ParamSink) -> Result<Self> {
        let std = cfg.hsn.init_std;
        let hidden = dim * cfg.hsn.ffn_ratio;
        let lin = |sink: &mut dyn ParamSink, n: &str, i, o| {
            Linear::declare(sink, &format!("{name}.{n}"), i, o, true, true, std)
        };
        Ok(Self {
            ln1: Norm::declare(sink, &format!("{name}.ln1"), dim, true)?,
            q: lin(sink, "attn.q", dim, dim)?,
            k: lin(sink, "attn.k", dim, dim)?,
            v: lin(sink, "attn.v", dim, dim)?,
            o: lin(sink, "attn.o", dim, dim)?,
            ln2: Norm::declare(sink, &format!("{name}.ln2"), dim, true)?,
            fc1: lin(sink, "ffn.fc1", dim, hidden)?,
            fc2: lin(sink, "ffn.fc2", hidden, dim)?,
            dim,
            heads: cfg.hsn.attn_heads,
            softmax: cfg.hsn.attention_softmax,
            fg_injection: cfg.toggles.fg_injection,
            eps: cfg.hsn.ln_eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `h + Wo·Attn(Wq·LN(h), Wk·mg, Wv·mg)` for `h: [B, Lq, d]`, `mg: [B, M, d]`.
    pub fn cross_attention<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, mg: Var) -> Result<Var> {
        let hs = g.shape(h).to_vec();
        let ms = g.shape(mg).to_vec();
        if hs.len() != 3 || ms.len() != 3 || hs[2] != self.dim || ms[2] != self.dim || hs[0] != ms[0] {
            return Err(HstError::dimension(format!(
                "cross-attention of width {} got queries {hs:?} and meta-global tokens {ms:?}",
                self.dim
            )));
        }
        if ms[1] == 0 {
            return Err(HstError::config("cross-attention needs at least one meta-global token"));
        }
        let x = self.ln1.apply(g, store, h, self.eps)?;
        let q = self.q.apply(g, store, x)?;
        let k = self.k.apply(g, store, mg)?;
        let v = self.v.apply(g, store, mg)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let a = attention_core(g, q, k, v, self.softmax)?;
        let a = merge_heads(g, a)?;
        let a = self.o.apply(g, store, a)?;
        g.add(h, a)
    }

    /// Position-wise FFN with its pre-norm: `fc2(gelu(fc1(LN(u))))`.
    pub fn ffn<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: Var) -> Result<Var> {
        let x = self.ln2.apply(g, store, u, self.eps)?;
        let x = self.fc1.apply(g, store, x)?;
        let x = g.gelu(x);
        self.fc2.apply(g, store, x)
    }

    /// One Side block. `fg` is the fine-grained map as tokens `[B, Lq, d]`
    /// and is ignored entirely when fine-grained injection is off.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        mg: Var,
        fg: Option<Var>,
    ) -> Result<Var> {
        let f = self.cross_attention(g, store, h, mg)?;
        let u = match fg.filter(|_| self.fg_injection) {
            Some(fg) => {
                if g.shape(fg) != g.shape(f) {
                    return Err(HstError::dimension(format!(
                        "fine-grained map {:?} does not match stage tokens {:?}",
                        g.shape(fg),
                        g.shape(f)
                    )));
                }
                g.add(f, fg)?
            }
            None => f,
        };
        let y = self.ffn(g, store, u)?;
        g.add(u, y)
    }
}

#[derive(Clone, Debug)]
pub struct SideNet {
    stem1: Conv,
    stem2: Conv,
    stages: Vec<Vec<SideBlock>>,
    downs: Vec<Conv>,
    dims: [usize; STAGES],
    depth: usize,
}

impl SideNet {
    pub fn declare(cfg: &ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        let dims = cfg.hsn.stage_dims;
        let depth = cfg.backbone.depth;
        let stem1 = Conv::declare(sink, "side.stem.conv1", 3, cfg.hsn.stem_channels, 3, 2, 1)?;
        let stem2 = Conv::declare(sink, "side.stem.conv2", cfg.hsn.stem_channels, dims[0], 3, 2, 1)?;
        let mut stages = vec![Vec::new(); STAGES];
        for i in 0..depth {
            let j = stage_of_block(i, depth);
            let k = stages[j].len();
            stages[j].push(SideBlock::declare(
                cfg,
                &format!("side.stage{j}.block{k}"),
                dims[j],
                sink,
            )?);
        }
        let downs = (0..STAGES - 1)
            .map(|j| Conv::declare(sink, &format!("side.down{j}"), dims[j], dims[j + 1], 2, 2, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem1,
            stem2,
            stages,
            downs,
            dims,
            depth,
        })
    }

    pub fn stage_dims(&self) -> [usize; STAGES] {
        self.dims
    }

    pub fn blocks(&self, stage: usize) -> &[SideBlock] {
        &self.stages[stage]
    }

    /// Two 3×3 stride-2 convolutions with GELU between: `[B, 3, H, W]` to `[B, d_1, H/4, W/4]`.
    pub fn conv_stem<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] == 0 || s[3] == 0 {
            return Err(HstError::dimension(format!(
                "stem needs [B, C, H, W] with H and W positive multiples of 4, got {s:?}"
            )));
        }
        let x = self.stem1.apply(g, store, image)?;
        let x = g.gelu(x);
        self.stem2.apply(g, store, x)
    }

    /// 2×2 stride-2 projection from stage `stage` to the next.
    pub fn stage_transition<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stage: usize,
        x: Var,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(HstError::dimension(format!(
                "stage transition needs even spatial dims, got {s:?}"
            )));
        }
        self.downs[stage].apply(g, store, x)
    }

    /// Runs the side network given the normalised image and one bridge output per backbone block.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        feeds: &[BridgeOutput],
    ) -> Result<[Var; STAGES]> {
        if feeds.len() != self.depth {
            return Err(HstError::Wiring(format!(
                "side network has {} blocks but received {} bridge outputs",
                self.depth,
                feeds.len()
            )));
        }
        let mut map = g.scoped("side.stem", |g| self.conv_stem(g, store, image))?;
        let mut pyramid = Vec::with_capacity(STAGES);
        let mut feed = feeds.iter();
        for (j, blocks) in self.stages.iter().enumerate() {
            if j > 0 {
                map = g.scoped("side.transition", |g| self.stage_transition(g, store, j - 1, map))?;
            }
            let (h, w) = (g.shape(map)[2], g.shape(map)[3]);
            let mut tokens = nchw_to_tokens(g, map)?;
            for block in blocks {
                let out = feed.next().expect("feed count checked");
                tokens = g.scoped("side.blocks", |g| -> Result<Var> {
                    let fg = match out.fine {
                        Some(f) => Some(nchw_to_tokens(g, f)?),
                        None => None,
                    };
                    block.forward(g, store, tokens, out.meta_global, fg)
                })?;
            }
            map = tokens_to_nchw(g, tokens, h, w)?;
            pyramid.push(map);
        }
        Ok(pyramid.try_into().expect("four stages"))
    }
}
