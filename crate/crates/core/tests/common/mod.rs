#![allow(dead_code)]

use hst_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Relative error with the denominator floored at 1e-3, so entries with
/// near-zero true gradient are judged on absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of `f` with central differences for every
/// element of every input. Returns the worst relative error.
pub fn fd_check(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// sum(y * w) for a fixed random weighting `w`, so no adjoint is trivially uniform.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random(&mut r, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Central-difference check of `d f / d p` for the given scalars of a
/// parameter store, where `f` builds a scalar loss reading from `store`.
/// Returns the worst relative error.
pub fn param_fd_check(
    store: &hst_core::ParamStore<f64>,
    targets: &[(hst_core::ParamId, usize)],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &hst_core::ParamStore<f64>) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let analytic: std::collections::HashMap<_, _> = g.param_grads(&grads).into_iter().collect();
    let eval = |s: &hst_core::ParamStore<f64>| {
        let mut g = Graph::inference();
        let l = f(&mut g, s);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &(id, j) in targets {
        let a = analytic.get(&id).map_or(0.0, |t| t.data()[j]);
        let orig = work.value(id).data()[j];
        work.value_mut(id).data_mut()[j] = orig + h;
        let up = eval(&work);
        work.value_mut(id).data_mut()[j] = orig - h;
        let down = eval(&work);
        work.value_mut(id).data_mut()[j] = orig;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
    }
    worst
}

/// Every scalar of the named parameters.
pub fn all_scalars(store: &hst_core::ParamStore<f64>, names: &[&str]) -> Vec<(hst_core::ParamId, usize)> {
    names
        .iter()
        .flat_map(|n| {
            let id = store.id(n).unwrap_or_else(|| panic!("no parameter {n}"));
            (0..store.value(id).numel()).map(move |j| (id, j))
        })
        .collect()
}

/// Every scalar of every parameter whose name starts with `prefix`.
pub fn scalars_under(store: &hst_core::ParamStore<f64>, prefix: &str) -> Vec<(hst_core::ParamId, usize)> {
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if p.name().starts_with(prefix) {
            out.extend((0..p.numel()).map(|j| (id, j)));
        }
    }
    out
}

/// Closed-form scalar counts: (trainable, frozen).
pub fn closed_form(cfg: &hst_core::ModelConfig) -> (usize, usize) {
    let v = &cfg.backbone;
    let (d, p, l) = (v.embed_dim, v.patch_size, v.depth);
    let hidden = d * v.mlp_ratio;
    let grid = v.image_size / p;
    let cls = usize::from(v.use_cls_token);
    let mut frozen = d * 3 * p * p + d + (grid * grid + cls) * d + cls * d;
    frozen += l * ((3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d));
    let ln = (2 * l + 1) * 2 * d;
    let mut trainable = v.num_meta_tokens * d;
    if cfg.toggles.ln_tuning {
        trainable += ln;
    } else {
        frozen += ln;
    }
    let k = cfg.num_classes;
    if !cfg.toggles.side_network {
        return (trainable + d * k + k, frozen);
    }
    let dims = cfg.hsn.stage_dims;
    let per_stage = l / 4;
    let bias = usize::from(cfg.bridge.bias);
    let projections = if cfg.toggles.weight_sharing { 1 } else { per_stage };
    trainable += dims.iter().map(|&dj| projections * (d * dj + bias * dj)).sum::<usize>();
    let c = cfg.hsn.stem_channels;
    trainable += 3 * c * 9 + c + c * dims[0] * 9 + dims[0];
    let r = cfg.hsn.ffn_ratio;
    for &dj in &dims {
        let block = 4 * dj + 4 * (dj * dj + dj) + (dj * r * dj + r * dj) + (r * dj * dj + dj);
        trainable += per_stage * block;
    }
    for j in 0..3 {
        trainable += dims[j] * dims[j + 1] * 4 + dims[j + 1];
    }
    trainable += dims[3] * k + k;
    (trainable, frozen)
}

pub fn five_configs() -> Vec<hst_core::ModelConfig> {
    let base = hst_core::ModelConfig::default();
    let mut out = vec![base.clone()];
    let mut c = base.clone();
    c.toggles.weight_sharing = false;
    c.backbone.num_meta_tokens = 3;
    out.push(c);
    let mut c = base.clone();
    c.toggles.ln_tuning = false;
    c.bridge.bias = false;
    c.backbone.use_cls_token = true;
    c.num_classes = 7;
    out.push(c);
    let mut c = base.clone();
    c.backbone.image_size = 64;
    c.backbone.depth = 12;
    c.backbone.embed_dim = 48;
    c.backbone.num_heads = 3;
    c.hsn.stage_dims = [8, 16, 32, 48];
    c.hsn.stem_channels = 4;
    c.hsn.ffn_ratio = 2;
    out.push(c);
    let mut c = base;
    c.toggles.side_network = false;
    c.toggles.ln_tuning = false;
    c.backbone.num_meta_tokens = 0;
    out.push(c);
    out
}
