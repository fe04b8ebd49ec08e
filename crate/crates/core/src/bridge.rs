//! Adaptive Feature Bridge.
//!
//! Each backbone tap is projected by its stage's linear map `W_j` and then
//! split two ways: the meta-global tokens `[W_j·meta ‖ mean(W_j·patch)]` and a
//! fine-grained map, the projected patch grid resized bilinearly to the
//! stage resolution. Projection happens before pooling and interpolation.

use crate::backbone::Tap;
use crate::config::ModelConfig;
use crate::error::{HstError, Result};
use crate::layers::Linear;
use crate::param::{ParamSink, ParamStore};
use crate::tensor::{Element, Graph, Var};

pub const STAGES: usize = 4;

/// Downsampling factor of stage `j` (0-based): 4, 8, 16, 32.
pub fn stage_stride(stage: usize) -> usize {
    4 << stage
}

/// Side length of stage `j`'s feature map.
pub fn stage_resolution(image_size: usize, stage: usize) -> usize {
    image_size / stage_stride(stage)
}

/// Stage that block `i` of a depth-`depth` backbone feeds.
pub fn stage_of_block(block: usize, depth: usize) -> usize {
    block / (depth / STAGES).max(1)
}

/// Number of distinct projection maps: one per stage when shared, else one per block.
pub fn shared_projection_count(cfg: &ModelConfig) -> usize {
    if cfg.toggles.weight_sharing {
        STAGES
    } else {
        cfg.backbone.depth
    }
}

/// Output of one bridge application.
#[derive(Clone, Copy, Debug)]
pub struct BridgeOutput {
    /// `[B, M, d_j]`.
    pub meta_global: Var,
    /// `[B, d_j, H_j, W_j]`; absent when fine-grained injection is off.
    pub fine: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Bridge {
    projections: Vec<Linear>,
    /// Projection index used by each backbone block.
    route: Vec<usize>,
    stage_dims: [usize; STAGES],
    depth: usize,
    image_size: usize,
    global_t: bool,
    fine: bool,
}

impl Bridge {
    pub fn declare(cfg: &ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        let d_vit = cfg.backbone.embed_dim;
        let depth = cfg.backbone.depth;
        let dims = cfg.hsn.stage_dims;
        let std = cfg.hsn.init_std;
        let bias = cfg.bridge.bias;
        let (projections, route) = if cfg.toggles.weight_sharing {
            let p = (0..STAGES)
                .map(|j| Linear::declare(sink, &format!("bridge.stage{j}"), d_vit, dims[j], bias, true, std))
                .collect::<Result<Vec<_>>>()?;
            (p, (0..depth).map(|i| stage_of_block(i, depth)).collect())
        } else {
            let p = (0..depth)
                .map(|i| {
                    let d = dims[stage_of_block(i, depth)];
                    Linear::declare(sink, &format!("bridge.block{i}"), d_vit, d, bias, true, std)
                })
                .collect::<Result<Vec<_>>>()?;
            (p, (0..depth).collect())
        };
        Ok(Self {
            projections,
            route,
            stage_dims: dims,
            depth,
            image_size: cfg.backbone.image_size,
            global_t: cfg.toggles.global_t,
            fine: cfg.toggles.fg_injection,
        })
    }

    pub fn projection_count(&self) -> usize {
        self.projections.len()
    }

    /// The projection applied to block `i`'s tap.
    pub fn projection(&self, block: usize) -> &Linear {
        &self.projections[self.route[block]]
    }

    /// Applies the bridge to block `block`'s tap.
    pub fn afb<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tap: Tap,
        block: usize,
    ) -> Result<BridgeOutput> {
        if block >= self.depth {
            return Err(HstError::Wiring(format!(
                "bridge has no route for block {block} of {}",
                self.depth
            )));
        }
        let stage = stage_of_block(block, self.depth);
        let proj = self.projection(block);
        let ps = g.shape(tap.patch).to_vec();
        let (b, n_patch) = (ps[0], ps[1]);
        let grid = (n_patch as f64).sqrt().round() as usize;
        if grid * grid != n_patch || n_patch == 0 {
            return Err(HstError::Layout(format!(
                "patch token count {n_patch} is not a perfect square"
            )));
        }
        let patch = proj.apply(g, store, tap.patch)?;
        let mut parts = Vec::with_capacity(2);
        if g.shape(tap.meta)[1] > 0 {
            parts.push(proj.apply(g, store, tap.meta)?);
        }
        let d = self.stage_dims[stage];
        if self.global_t {
            let pooled = g.mean_axis(patch, 1)?;
            parts.push(g.reshape(pooled, &[b, 1, d])?);
        }
        let meta_global = match parts.len() {
            0 => {
                return Err(HstError::config(
                    "meta-global branch is empty: no meta tokens and GlobalT disabled",
                ))
            }
            1 => parts[0],
            _ => g.concat(&parts, 1)?,
        };
        let fine = if self.fine {
            let res = stage_resolution(self.image_size, stage);
            let grid_map = g.reshape(patch, &[b, grid, grid, d])?;
            let nchw = g.permute(grid_map, &[0, 3, 1, 2])?;
            Some(g.bilinear_resize(nchw, res, res)?)
        } else {
            None
        };
        Ok(BridgeOutput { meta_global, fine })
    }
}
