mod common;

use common::{random, rng};
use hst_core::backbone::Tap;
use hst_core::bridge::{shared_projection_count, stage_of_block, stage_resolution, Bridge, STAGES};
use hst_core::model::{param_specs, HstModel};
use hst_core::param::{Initializer, ParamStore};
use hst_core::{Graph, HstError, ModelConfig, Tensor};
use rand::SeedableRng;

fn cfg(image: usize, patch: usize, depth: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.image_size = image;
    cfg.backbone.patch_size = patch;
    cfg.backbone.depth = depth;
    cfg.hsn.init_std = 0.3;
    cfg
}

fn build(cfg: &ModelConfig, seed: u64) -> (Bridge, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bridge = Bridge::declare(
        cfg,
        &mut Initializer {
            store: &mut store,
            rng: &mut r,
        },
    )
    .unwrap();
    // non-zero biases
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name().ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let t = random(&mut r, store.value(id).shape());
        *store.value_mut(id) = t;
    }
    (bridge, store)
}

/// `W x + b` row by row, `W: [out, in]`.
fn project(store: &ParamStore<f64>, bridge: &Bridge, block: usize, x: &[f64], d_in: usize) -> Vec<f64> {
    let lin = bridge.projection(block);
    let w = store.value(lin.weight);
    let b = store.value(lin.bias.unwrap());
    let d_out = b.numel();
    let mut out = Vec::new();
    for row in x.chunks(d_in) {
        for o in 0..d_out {
            out.push(b.data()[o] + (0..d_in).map(|i| w.data()[o * d_in + i] * row[i]).sum::<f64>());
        }
    }
    out
}

fn tap(g: &mut Graph<f64>, meta: &Tensor<f64>, patch: &Tensor<f64>) -> Tap {
    Tap {
        meta: g.constant(meta.clone()),
        patch: g.constant(patch.clone()),
    }
}

#[test]
fn meta_global_is_projected_meta_then_pooled_patches() {
    let c = cfg(32, 4, 8);
    let (bridge, store) = build(&c, 1);
    let mut r = rng(2);
    let (b, n, p, d) = (2, 1, 64, 64);
    let meta = random(&mut r, &[b, n, d]);
    let patch = random(&mut r, &[b, p, d]);
    for block in 0..8 {
        let mut g = Graph::inference();
        let t = tap(&mut g, &meta, &patch);
        let out = bridge.afb(&mut g, &store, t, block).unwrap();
        let mg = g.value(out.meta_global);
        let dj = c.hsn.stage_dims[stage_of_block(block, 8)];
        assert_eq!(mg.shape(), [b, n + 1, dj]);
        let pm = project(&store, &bridge, block, meta.data(), d);
        let pp = project(&store, &bridge, block, patch.data(), d);
        for bi in 0..b {
            for o in 0..dj {
                let want_meta = pm[bi * dj + o];
                let want_glob = (0..p).map(|k| pp[(bi * p + k) * dj + o]).sum::<f64>() / p as f64;
                assert!((mg.data()[(bi * 2) * dj + o] - want_meta).abs() < 1e-12);
                assert!((mg.data()[(bi * 2 + 1) * dj + o] - want_glob).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pooling_commutes_with_projection() {
    // mean over tokens of W·x equals W·(mean over tokens of x) for an affine map
    let c = cfg(32, 4, 8);
    let (bridge, store) = build(&c, 3);
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let patch = random(&mut r, &[1, 64, 64]);
        let meta = random(&mut r, &[1, 1, 64]);
        let block = trial % 8;
        let mut g = Graph::inference();
        let t = tap(&mut g, &meta, &patch);
        let out = bridge.afb(&mut g, &store, t, block).unwrap();
        let mg = g.value(out.meta_global);
        let dj = mg.shape()[2];
        let mean: Vec<f64> = (0..64)
            .map(|i| (0..64).map(|k| patch.data()[k * 64 + i]).sum::<f64>() / 64.0)
            .collect();
        let want = project(&store, &bridge, block, &mean, 64);
        for o in 0..dj {
            worst = worst.max((mg.data()[dj + o] - want[o]).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn fine_map_matching_resolution_is_the_projection_bit_for_bit() {
    // 64 px, patch 16: a 4x4 grid, which is exactly stage 2's resolution
    let c = cfg(64, 16, 8);
    let (bridge, store) = build(&c, 5);
    let mut r = rng(6);
    let meta = random(&mut r, &[2, 1, 64]);
    let patch = random(&mut r, &[2, 16, 64]);
    for block in [4, 5] {
        assert_eq!(stage_of_block(block, 8), 2);
        let mut g = Graph::inference();
        let t = tap(&mut g, &meta, &patch);
        let out = bridge.afb(&mut g, &store, t, block).unwrap();
        let fine = g.value(out.fine.unwrap()).clone();
        assert_eq!(fine.shape(), [2, 64, 4, 4]);
        let projected = bridge.projection(block).apply(&mut g, &store, t.patch).unwrap();
        let y = g.permute(projected, &[0, 2, 1]).unwrap();
        let y = g.reshape(y, &[2, 64, 4, 4]).unwrap();
        assert!(fine.bit_eq(g.value(y)));
    }
}

#[test]
fn fine_maps_at_224_land_on_stage_resolutions() {
    let mut c = cfg(224, 16, 12);
    c.hsn.stage_dims = [8, 8, 8, 8];
    c.backbone.embed_dim = 16;
    c.backbone.num_heads = 2;
    let (bridge, store) = build(&c, 7);
    let mut r = rng(8);
    let meta = random(&mut r, &[1, 1, 16]);
    let patch = random(&mut r, &[1, 196, 16]);
    for block in 0..12 {
        let mut g = Graph::inference();
        let t = tap(&mut g, &meta, &patch);
        let out = bridge.afb(&mut g, &store, t, block).unwrap();
        let res = stage_resolution(224, stage_of_block(block, 12));
        assert_eq!(g.shape(out.fine.unwrap()), [1, 8, res, res]);
    }
    assert_eq!(
        (0..4).map(|j| stage_resolution(224, j)).collect::<Vec<_>>(),
        [56, 28, 14, 7]
    );
}

#[test]
fn sharing_reduces_projections_and_trainable_count_by_closed_form() {
    for (depth, dims, d_vit) in [
        (8, [16, 32, 64, 128], 64),
        (12, [8, 16, 24, 32], 32),
        (4, [4, 4, 8, 8], 16),
    ] {
        let mut shared = cfg(32, 4, depth);
        shared.hsn.stage_dims = dims;
        shared.backbone.embed_dim = d_vit;
        let mut unshared = shared.clone();
        unshared.toggles.weight_sharing = false;
        assert_eq!(shared_projection_count(&shared), 4);
        assert_eq!(shared_projection_count(&unshared), depth);
        let (bs, _) = build(&shared, 0);
        let (bu, _) = build(&unshared, 0);
        assert_eq!(bs.projection_count(), 4);
        assert_eq!(bu.projection_count(), depth);

        let trainable = |c: &ModelConfig| -> usize {
            param_specs(c)
                .unwrap()
                .iter()
                .filter(|s| s.trainable)
                .map(|s| s.numel())
                .sum()
        };
        let per_stage = depth / 4;
        let delta: usize = dims.iter().map(|&dj| (per_stage - 1) * (d_vit * dj + dj)).sum();
        assert_eq!(trainable(&unshared) - trainable(&shared), delta);
    }
}

#[test]
fn shared_projection_is_one_parameter_per_stage() {
    let c = cfg(32, 4, 8);
    let (bridge, _) = build(&c, 0);
    for block in 0..8 {
        let first = stage_of_block(block, 8) * 2;
        assert_eq!(bridge.projection(block).weight, bridge.projection(first).weight);
    }
    let distinct: std::collections::BTreeSet<_> = (0..8).map(|i| bridge.projection(i).weight).collect();
    assert_eq!(distinct.len(), STAGES);

    let mut u = c.clone();
    u.toggles.weight_sharing = false;
    let (bridge, _) = build(&u, 0);
    let distinct: std::collections::BTreeSet<_> = (0..8).map(|i| bridge.projection(i).weight).collect();
    assert_eq!(distinct.len(), 8);
}

#[test]
fn bridge_is_affine_in_its_tap() {
    let mut c = cfg(32, 4, 8);
    c.bridge.bias = false;
    let (bridge, store) = build(&c, 9);
    let mut r = rng(10);
    let (m1, p1) = (random(&mut r, &[1, 1, 64]), random(&mut r, &[1, 64, 64]));
    let (m2, p2) = (random(&mut r, &[1, 1, 64]), random(&mut r, &[1, 64, 64]));
    let (a, b) = (0.7, -1.3);
    let combine =
        |x: &Tensor<f64>, y: &Tensor<f64>| Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b * y.data()[i]);
    let run = |m: &Tensor<f64>, p: &Tensor<f64>| {
        let mut g = Graph::inference();
        let t = tap(&mut g, m, p);
        let out = bridge.afb(&mut g, &store, t, 3).unwrap();
        (g.value(out.meta_global).clone(), g.value(out.fine.unwrap()).clone())
    };
    let (mg1, f1) = run(&m1, &p1);
    let (mg2, f2) = run(&m2, &p2);
    let (mg, f) = run(&combine(&m1, &m2), &combine(&p1, &p2));
    assert!(mg.max_abs_diff(&combine(&mg1, &mg2)) < 1e-12);
    assert!(f.max_abs_diff(&combine(&f1, &f2)) < 1e-12);
}

#[test]
fn toggles_shape_the_outputs() {
    let mut c = cfg(32, 4, 8);
    c.toggles.global_t = false;
    c.toggles.fg_injection = false;
    let (bridge, store) = build(&c, 0);
    let mut g = Graph::inference();
    let t = tap(&mut g, &Tensor::zeros(vec![1, 1, 64]), &Tensor::zeros(vec![1, 64, 64]));
    let out = bridge.afb(&mut g, &store, t, 0).unwrap();
    assert_eq!(g.shape(out.meta_global), [1, 1, 16]);
    assert!(out.fine.is_none());

    c.backbone.num_meta_tokens = 0;
    let (bridge, store) = build(&c, 0);
    let mut g = Graph::inference();
    let t = tap(&mut g, &Tensor::zeros(vec![1, 0, 64]), &Tensor::zeros(vec![1, 64, 64]));
    assert!(matches!(bridge.afb(&mut g, &store, t, 0), Err(HstError::Config(_))));
}

#[test]
fn non_square_token_count_is_a_layout_error() {
    let c = cfg(32, 4, 8);
    let (bridge, store) = build(&c, 0);
    let mut g = Graph::inference();
    let t = tap(&mut g, &Tensor::zeros(vec![1, 1, 64]), &Tensor::zeros(vec![1, 60, 64]));
    let err = bridge.afb(&mut g, &store, t, 0).unwrap_err();
    assert!(matches!(err, HstError::Layout(_)), "{err}");
    let t = tap(&mut g, &Tensor::zeros(vec![1, 1, 64]), &Tensor::zeros(vec![1, 64, 64]));
    assert!(matches!(bridge.afb(&mut g, &store, t, 8), Err(HstError::Wiring(_))));
}

#[test]
fn model_bridge_sees_the_backbone_taps() {
    // The model's GlobalT token for the last block equals W·mean(patch tap).
    let c = cfg(32, 4, 8);
    let model = HstModel::<f64>::new(&c, 11).unwrap();
    let mut r = rng(12);
    let x = Tensor::from_fn(vec![1, 3, 32, 32], |_| rand::Rng::random_range(&mut r, 0.0..1.0));
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let arch = model.architecture();
    let out = arch.backbone.forward(&mut g, model.params(), xv).unwrap();
    let bridge = arch.bridge.as_ref().unwrap();
    let tap7 = out.taps[7];
    let b = bridge.afb(&mut g, model.params(), tap7, 7).unwrap();
    let patch = g.value(tap7.patch).clone();
    let mean: Vec<f64> = (0..64)
        .map(|i| (0..64).map(|k| patch.data()[k * 64 + i]).sum::<f64>() / 64.0)
        .collect();
    let want = project(model.params(), bridge, 7, &mean, 64);
    let got = &g.value(b.meta_global).data()[128..256];
    for (a, w) in got.iter().zip(&want) {
        assert!((a - w).abs() < 1e-9);
    }
}
