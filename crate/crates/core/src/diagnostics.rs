//! Introspection: per-layer meta/patch cosine similarity, op-count and
//! wall-time profiling, and the attention complexity sweep.
//!
//! Tables are emitted as comma-separated text with a header row.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bridge::{stage_of_block, stage_resolution, STAGES};
use crate::config::ModelConfig;
use crate::error::{HstError, Result};
use crate::model::HstModel;
use crate::side_net::attention_core;
use crate::tensor::cost;
use crate::tensor::kernels::{self, MatView};
use crate::tensor::{Element, Graph, Tensor};

/// Cosine of two vectors, clamped to `[-1, 1]`. Zero when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean over every axis but the last.
fn mean_vector<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    let d = *t.shape().last().unwrap_or(&0);
    let mut acc = vec![0.0; d];
    if d == 0 {
        return acc;
    }
    let rows = t.numel() / d;
    for row in t.data().chunks_exact(d) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.max(1) as f64);
    acc
}

/// Cosine between the meta output averaged over tokens and batch
/// (`meta: [B, N, d]`) and the mean patch token (`patch: [B, n, d]`).
pub fn tap_cosine<T: Element>(meta: &Tensor<T>, patch: &Tensor<T>) -> Result<f64> {
    let (ms, ps) = (meta.shape(), patch.shape());
    if ms.len() != 3 || ps.len() != 3 || ms[2] != ps[2] || ms[0] != ps[0] {
        return Err(HstError::dimension(format!(
            "meta {ms:?} and patch {ps:?} tokens do not pair up"
        )));
    }
    if ms[1] == 0 {
        return Err(HstError::config("cosine similarity needs at least one meta token"));
    }
    Ok(cosine(&mean_vector(meta), &mean_vector(patch)))
}

/// One value per backbone block for raw `[0, 1]` images.
pub fn cosine_similarity_per_layer<T: Element>(model: &HstModel<T>, images: &Tensor<T>) -> Result<Vec<f64>> {
    if model.config().backbone.num_meta_tokens == 0 {
        return Err(HstError::config(
            "cosine similarity needs meta tokens, but backbone.num_meta_tokens = 0",
        ));
    }
    let mut g = Graph::inference();
    let x = g.constant(model.normalize(images)?);
    let out = model.architecture().backbone.forward(&mut g, model.params(), x)?;
    out.taps
        .iter()
        .map(|tap| tap_cosine(g.value(tap.meta), g.value(tap.patch)))
        .collect()
}

/// Paired per-layer curves, one row per backbone block.
#[derive(Clone, Debug, PartialEq)]
pub struct LnComparison {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl LnComparison {
    pub fn rows(&self) -> usize {
        self.before.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("before,after\n");
        for (b, a) in self.before.iter().zip(&self.after) {
            s.push_str(&format!("{b:.9},{a:.9}\n"));
        }
        s
    }
}

/// Cosine curves of two snapshots of one architecture on the same images.
pub fn compare_ln_tuning<T: Element>(
    before: &HstModel<T>,
    after: &HstModel<T>,
    images: &Tensor<T>,
) -> Result<LnComparison> {
    let manifest = |m: &HstModel<T>| -> Vec<(String, Vec<usize>)> {
        m.params()
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().shape().to_vec()))
            .collect()
    };
    let (mb, ma) = (manifest(before), manifest(after));
    if mb != ma {
        let first = mb.iter().zip(&ma).find(|(x, y)| x != y).map(|(x, _)| x.0.clone());
        return Err(HstError::config(format!(
            "architecture mismatch: {} vs {} parameters, first difference at {}",
            mb.len(),
            ma.len(),
            first.unwrap_or_else(|| "the tail of the manifest".into())
        )));
    }
    Ok(LnComparison {
        before: cosine_similarity_per_layer(before, images)?,
        after: cosine_similarity_per_layer(after, images)?,
    })
}

// ----- op counts -------------------------------------------------------------

/// Core cross-attention cost for `lq` queries over `m` keys of width `d`
/// split into `heads`: both products, the score scaling and the softmax.
pub fn cross_attention_flops(lq: usize, m: usize, d: usize, heads: usize, softmax: bool) -> u64 {
    let (lq, m, d, h) = (lq as u64, m as u64, d as u64, heads as u64);
    if softmax {
        4 * lq * m * d + (cost::ELEMENTWISE + cost::SOFTMAX) * h * lq * m
    } else {
        let dh = d / h;
        2 * h * dh * dh * m + cost::ELEMENTWISE * h * dh * dh + 2 * lq * d * dh
    }
}

/// Single-head softmax self-attention over `len` tokens of width `d`.
pub fn self_attention_flops(len: usize, d: usize) -> u64 {
    let (l, d) = (len as u64, d as u64);
    4 * l * l * d + (cost::ELEMENTWISE + cost::SOFTMAX) * l * l
}

fn linear_flops(rows: u64, d_in: u64, d_out: u64, bias: bool) -> u64 {
    2 * rows * d_in * d_out + if bias { rows * d_out } else { 0 }
}

/// Closed-form op counts of one classification forward at batch `batch`,
/// keyed by the scopes the model records on its graph.
pub fn analytic_flops(cfg: &ModelConfig, batch: usize) -> BTreeMap<&'static str, u64> {
    let vit = &cfg.backbone;
    let b = batch as u64;
    let d = vit.embed_dim as u64;
    let n = vit.num_patches() as u64;
    let n_meta = vit.num_meta_tokens as u64;
    let cls = u64::from(vit.use_cls_token);
    let t = n_meta + cls + n;
    let hid = d * vit.mlp_ratio as u64;
    let heads = vit.num_heads as u64;
    let p = vit.patch_size as u64;
    let mut out = BTreeMap::new();

    let mut backbone = linear_flops(b * n, 3 * p * p, d, true) + b * (n + cls) * d;
    let rows = b * t;
    let block = cost::LAYER_NORM * rows * d
        + linear_flops(rows, d, 3 * d, true)
        + 4 * b * t * t * d
        + (cost::ELEMENTWISE + cost::SOFTMAX) * b * heads * t * t
        + linear_flops(rows, d, d, true)
        + cost::ELEMENTWISE * rows * d
        + cost::LAYER_NORM * rows * d
        + linear_flops(rows, d, hid, true)
        + cost::GELU * rows * hid
        + linear_flops(rows, hid, d, true)
        + cost::ELEMENTWISE * rows * d;
    backbone += vit.depth as u64 * block + cost::LAYER_NORM * rows * d;
    out.insert("backbone", backbone);

    let classes = cfg.num_classes as u64;
    if !cfg.toggles.side_network {
        out.insert(
            "head",
            cost::ELEMENTWISE * b * n * d + linear_flops(b, d, classes, true),
        );
        return out;
    }

    let dims = cfg.hsn.stage_dims.map(|x| x as u64);
    let size = vit.image_size as u64;
    let grid = vit.grid() as u64;
    let bias = cfg.bridge.bias;
    let m = cfg.meta_global_len();
    let mut bridge = 0;
    for i in 0..vit.depth {
        let j = stage_of_block(i, vit.depth);
        let dj = dims[j];
        bridge += linear_flops(b * n, d, dj, bias);
        if n_meta > 0 {
            bridge += linear_flops(b * n_meta, d, dj, bias);
        }
        if cfg.toggles.global_t {
            bridge += cost::ELEMENTWISE * b * n * dj;
        }
        let res = stage_resolution(vit.image_size, j) as u64;
        if cfg.toggles.fg_injection && res != grid {
            bridge += cost::BILINEAR * b * dj * res * res;
        }
    }
    out.insert("bridge", bridge);

    let c1 = cfg.hsn.stem_channels as u64;
    let (h1, h2) = ((size / 2).pow(2), (size / 4).pow(2));
    let stem =
        linear_flops(b * h1, 27, c1, true) + cost::GELU * b * c1 * h1 + linear_flops(b * h2, 9 * c1, dims[0], true);
    out.insert("side.stem", stem);

    let area = |j: usize| (size / (4 << j) as u64).pow(2);
    let transition: u64 = (1..STAGES)
        .map(|j| linear_flops(b * area(j), 4 * dims[j - 1], dims[j], true))
        .sum();
    out.insert("side.transition", transition);

    let mut blocks = 0;
    for i in 0..vit.depth {
        let j = stage_of_block(i, vit.depth);
        let (dj, rows) = (dims[j], b * area(j));
        let hd = dj * cfg.hsn.ffn_ratio as u64;
        let kv_rows = b * m as u64;
        blocks += cost::LAYER_NORM * rows * dj
            + linear_flops(rows, dj, dj, true)
            + 2 * linear_flops(kv_rows, dj, dj, true)
            + b * cross_attention_flops(
                area(j) as usize,
                m,
                dj as usize,
                cfg.hsn.attn_heads,
                cfg.hsn.attention_softmax,
            )
            + linear_flops(rows, dj, dj, true)
            + cost::ELEMENTWISE * rows * dj
            + if cfg.toggles.fg_injection {
                cost::ELEMENTWISE * rows * dj
            } else {
                0
            }
            + cost::LAYER_NORM * rows * dj
            + linear_flops(rows, dj, hd, true)
            + cost::GELU * rows * hd
            + linear_flops(rows, hd, dj, true)
            + cost::ELEMENTWISE * rows * dj;
    }
    out.insert("side.blocks", blocks);

    let d4 = dims[STAGES - 1];
    out.insert(
        "head",
        cost::ELEMENTWISE * b * d4 * area(STAGES - 1) + linear_flops(b, d4, classes, true),
    );
    out
}

// ----- profiling -------------------------------------------------------------

/// Averaged cost of a full classification forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub batch: usize,
    pub trials: usize,
    pub analytic: BTreeMap<String, u64>,
    pub counted: BTreeMap<String, u64>,
    pub mean_secs: f64,
    /// Bytes held by every tensor on the forward tape at its end.
    pub peak_live_bytes: usize,
}

impl ProfileReport {
    pub fn analytic_total(&self) -> u64 {
        self.analytic.values().sum()
    }

    pub fn counted_total(&self) -> u64 {
        self.counted.values().sum()
    }

    /// Per-scope table: `scope,analytic_flops,counted_flops`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,analytic_flops,counted_flops\n");
        let scopes: std::collections::BTreeSet<&String> = self.analytic.keys().chain(self.counted.keys()).collect();
        for k in scopes {
            let a = self.analytic.get(k).copied().unwrap_or(0);
            let c = self.counted.get(k).copied().unwrap_or(0);
            s.push_str(&format!("{k},{a},{c}\n"));
        }
        s.push_str(&format!("total,{},{}\n", self.analytic_total(), self.counted_total()));
        s
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "batch={}", self.batch)?;
        writeln!(f, "trials={}", self.trials)?;
        writeln!(f, "analytic_flops={}", self.analytic_total())?;
        writeln!(f, "counted_flops={}", self.counted_total())?;
        writeln!(f, "mean_wall_secs={:.6}", self.mean_secs)?;
        write!(f, "peak_live_bytes={}", self.peak_live_bytes)
    }
}

/// Times `trials` inference forwards on a constant mid-grey batch.
pub fn profile_model<T: Element>(model: &HstModel<T>, batch: usize, trials: usize) -> Result<ProfileReport> {
    let size = model.config().backbone.image_size;
    let images = model.normalize(&Tensor::full([batch, 3, size, size], T::cast(0.5)))?;
    let trials = trials.max(1);
    let mut counted = BTreeMap::new();
    let mut peak = 0;
    let mut total = 0.0;
    for _ in 0..trials {
        let start = Instant::now();
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        model.logits_graph(&mut g, x)?;
        total += start.elapsed().as_secs_f64();
        peak = peak.max(g.live_bytes());
        counted = g.flops_by_scope().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    }
    Ok(ProfileReport {
        batch,
        trials,
        analytic: analytic_flops(model.config(), batch)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        counted,
        mean_secs: total / trials as f64,
        peak_live_bytes: peak,
    })
}

/// How many repetitions a timing point gets: `trials`, cut short once a
/// point has used `max_secs` (at least one trial always runs).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialBudget {
    pub trials: usize,
    pub max_secs: f64,
}

impl Default for TrialBudget {
    fn default() -> Self {
        Self {
            trials: 100,
            max_secs: f64::INFINITY,
        }
    }
}

fn time_trials(budget: TrialBudget, mut f: impl FnMut()) -> (usize, f64) {
    let mut spent = 0.0;
    let mut done = 0;
    while done < budget.trials.max(1) {
        let start = Instant::now();
        f();
        spent += start.elapsed().as_secs_f64();
        done += 1;
        if spent >= budget.max_secs {
            break;
        }
    }
    (done, spent / done as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityRow {
    pub len: usize,
    pub flops: u64,
    pub trials: usize,
    pub mean_secs: f64,
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut s = String::from("len,flops,trials,mean_secs\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.9}\n", r.len, r.flops, r.trials, r.mean_secs));
    }
    s
}

/// Least-squares slope of `ln(mean_secs)` against `ln(len)`.
pub fn loglog_slope(rows: &[ComplexityRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.len as f64).ln(), r.mean_secs.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let dist = StandardNormal;
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// Side-block attention of `len` queries over `m` meta-global keys of width
/// `d`, single head, for each length in `lengths`.
pub fn cross_attention_profile(
    lengths: &[usize],
    d: usize,
    m: usize,
    budget: TrialBudget,
) -> Result<Vec<ComplexityRow>> {
    if m == 0 {
        return Err(HstError::config("cross-attention needs at least one key"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = random_tensor(&[1, 1, m, d], &mut rng);
    let v = random_tensor(&[1, 1, m, d], &mut rng);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let q = random_tensor(&[1, 1, len, d], &mut rng);
        let mut failure = None;
        let (trials, mean_secs) = time_trials(budget, || {
            let mut g = Graph::inference();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            if let Err(e) = attention_core(&mut g, qv, kv, vv, true) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        rows.push(ComplexityRow {
            len,
            flops: cross_attention_flops(len, m, d, 1, true),
            trials,
            mean_secs,
        });
    }
    Ok(rows)
}

/// Softmax self-attention of `q, k, v: [L, d]` with the full `L × L` score
/// matrix formed in row blocks of `chunk` queries.
pub fn naive_self_attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let (len, d) = match q.shape() {
        &[l, d] => (l, d),
        s => {
            return Err(HstError::dimension(format!(
                "naive attention expects [L, d], got {s:?}"
            )))
        }
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(HstError::dimension("q, k and v must share one [L, d] shape"));
    }
    let chunk = chunk.clamp(1, len.max(1));
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0f32; len * d];
    let mut scores = vec![0f32; chunk * len];
    let mut probs = vec![0f32; chunk * len];
    for start in (0..len).step_by(chunk) {
        let c = chunk.min(len - start);
        let qc = &q.data()[start * d..(start + c) * d];
        kernels::gemm(
            MatView::new(qc, c, d, false),
            MatView::new(k.data(), len, d, false).t(),
            0.0,
            &mut scores[..c * len],
        );
        scores[..c * len].iter_mut().for_each(|s| *s *= scale);
        kernels::softmax(&scores[..c * len], c, len, 1, &mut probs[..c * len]);
        kernels::gemm(
            MatView::new(&probs[..c * len], c, len, false),
            MatView::new(v.data(), len, d, false),
            0.0,
            &mut out[start * d..(start + c) * d],
        );
    }
    Tensor::new(vec![len, d], out)
}

/// The quadratic baseline for [`cross_attention_profile`].
pub fn self_attention_profile(lengths: &[usize], d: usize, budget: TrialBudget) -> Result<Vec<ComplexityRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let q = random_tensor(&[len, d], &mut rng);
        let k = random_tensor(&[len, d], &mut rng);
        let v = random_tensor(&[len, d], &mut rng);
        let mut failure = None;
        let (trials, mean_secs) = time_trials(budget, || {
            if let Err(e) = naive_self_attention(&q, &k, &v, 256) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        rows.push(ComplexityRow {
            len,
            flops: self_attention_flops(len, d),
            trials,
            mean_secs,
        });
    }
    Ok(rows)
}
