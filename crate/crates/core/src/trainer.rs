//! AdamW training, the gradient-check harness and the freeze audit.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{HstError, Result};
use crate::model::{argmax, param_specs, HstModel};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{BackwardFault, Element, Graph, Tensor, Var};

/// Decoupled-weight-decay Adam. Decay applies only to parameters whose kind
/// decays (weights); norms, biases and tokens are exempt.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    /// Zero moments for every trainable parameter of `store`.
    pub fn new(cfg: &TrainConfig, store: &ParamStore<T>) -> Self {
        let mut m = BTreeMap::new();
        for (_, p) in store.iter().filter(|(_, p)| p.trainable()) {
            m.insert(p.name().to_string(), Tensor::zeros(p.value().shape().to_vec()));
        }
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Names the optimizer manages, sorted.
    pub fn managed_names(&self) -> Vec<String> {
        self.m.keys().cloned().collect()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One update of every trainable parameter from its stored gradient; a
    /// trainable parameter with no gradient is treated as having a zero one.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let (one, eps) = (T::one(), T::cast(self.eps));
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            let name = p.name().to_string();
            let decay = if p.kind().decays() { lr * self.weight_decay } else { 0.0 };
            let grad = p
                .grad()
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape().to_vec()));
            let (m, v) = match (self.m.get_mut(&name), self.v.get_mut(&name)) {
                (Some(m), Some(v)) => (m, v),
                _ => {
                    return Err(HstError::Wiring(format!(
                        "optimizer has no state for trainable `{name}`"
                    )))
                }
            };
            let value = store.value_mut(id);
            let (lr_t, decay_t) = (T::cast(lr), T::cast(decay));
            let (bc1, bc2) = (T::cast(bc1), T::cast(bc2));
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= decay_t * *w;
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Stores moments and step as `optim.*` checkpoint entries.
    pub fn save(&self, ck: &mut Checkpoint) {
        for (k, t) in &self.m {
            ck.insert(format!("optim.m.{k}"), t);
        }
        for (k, t) in &self.v {
            ck.insert(format!("optim.v.{k}"), t);
        }
        ck.insert("optim.step", &Tensor::<f64>::scalar(self.step as f64));
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        for (prefix, map) in [("optim.m.", &mut self.m), ("optim.v.", &mut self.v)] {
            for (k, t) in map.iter_mut() {
                let entry = ck
                    .get(&format!("{prefix}{k}"))
                    .ok_or_else(|| HstError::Wiring(format!("checkpoint lacks optimizer state `{prefix}{k}`")))?;
                if entry.shape() != t.shape() {
                    return Err(HstError::dimension(format!(
                        "optimizer state `{prefix}{k}` has the wrong shape"
                    )));
                }
                *t = entry.to();
            }
        }
        self.step = ck
            .get("optim.step")
            .map(|t| t.to::<f64>().item() as u64)
            .ok_or_else(|| HstError::Wiring("checkpoint lacks `optim.step`".into()))?;
        Ok(())
    }
}

/// Forward, cross-entropy and backward for one batch, leaving gradients on
/// the trainable parameters. Returns the loss and the logits.
pub fn backward_batch<T: Element>(
    model: &mut HstModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.constant(model.normalize(images)?);
    let logits = model.logits_graph(&mut g, x)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        let mut offending: Vec<String> = model
            .params()
            .iter()
            .filter(|(_, p)| !p.value().is_finite())
            .map(|(_, p)| p.name().to_string())
            .collect();
        if !images.is_finite() {
            offending.push("input".into());
        }
        if !g.value(logits).is_finite() {
            offending.push("logits".into());
        }
        return Err(HstError::NonFinite { loss: value, offending });
    }
    let grads = g.backward(loss)?;
    let store = model.params_mut();
    store.zero_grad();
    for (id, grad) in g.param_grads(&grads) {
        store.accumulate_grad(id, &grad)?;
    }
    Ok((value, g.value(logits).clone()))
}

fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub trainable_params: usize,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} epoch={} loss={:.6} accuracy={:.4} lr={:.3e} trainable_param_count={}",
            self.step, self.epoch, self.loss, self.accuracy, self.lr, self.trainable_params
        )
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Element> {
    pub model: HstModel<T>,
    pub optim: AdamW<T>,
    cfg: TrainConfig,
    total_steps: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(mut model: HstModel<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.apply_freeze_policy();
        let optim = AdamW::new(cfg, model.params());
        Ok(Self {
            model,
            optim,
            cfg: cfg.clone(),
            total_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step_count()
    }

    /// Learning rate for the next step: constant, or cosine-decayed to zero
    /// over the planned run when enabled.
    pub fn learning_rate(&self) -> f64 {
        let lr = self.cfg.learning_rate;
        if !self.cfg.cosine_decay || self.total_steps == 0 {
            return lr;
        }
        let t = (self.step_count() as f64 / self.total_steps as f64).min(1.0);
        0.5 * lr * (1.0 + (PI * t).cos())
    }

    /// Forward, backward and AdamW update on one batch.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<StepRecord> {
        self.train_step_with_lr(images, labels, self.learning_rate())
    }

    pub fn train_step_with_lr(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepRecord> {
        let (loss, logits) = backward_batch(&mut self.model, images, labels)?;
        self.optim.update(self.model.params_mut(), lr)?;
        self.model.params_mut().zero_grad();
        Ok(StepRecord {
            step: self.step_count(),
            epoch: 0,
            loss,
            accuracy: count_correct(&logits, labels) as f64 / labels.len() as f64,
            lr,
            trainable_params: self.model.params().trainable_count(),
        })
    }

    /// Trains until `epochs` epochs have been seen, starting from the current
    /// step, so a resumed trainer continues mid-epoch with the same batches
    /// an uninterrupted run would use.
    pub fn fit(
        &mut self,
        data: &Dataset,
        epochs: usize,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let per_epoch = data.len().div_ceil(self.cfg.batch_size.min(data.len()).max(1)) as u64;
        self.total_steps = per_epoch * epochs as u64;
        while self.step_count() < self.total_steps {
            let epoch = self.step_count() / per_epoch;
            let skip = (self.step_count() % per_epoch) as usize;
            let order = data.batch_indices(self.cfg.batch_size.min(data.len()), self.cfg.seed, epoch)?;
            for idx in &order[skip..] {
                let (images, labels) = data.batch::<T>(idx);
                let mut rec = self.train_step(&images, &labels)?;
                rec.epoch = epoch;
                on_step(self, &rec)?;
            }
        }
        Ok(())
    }

    /// Parameters, optimizer state and step as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(self.model.config().hash(), self.step_count(), self.model.params());
        self.optim.save(&mut ck);
        ck
    }

    /// Restores parameters and optimizer state; the config hash must match.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        check_hash(self.model.config(), ck)?;
        ck.load_into(self.model.params_mut())?;
        self.optim.load(ck)
    }
}

pub fn check_hash(cfg: &ModelConfig, ck: &Checkpoint) -> Result<()> {
    let expected = cfg.hash();
    if ck.config_hash != expected {
        return Err(HstError::config(format!(
            "checkpoint config hash {:016x} does not match the requested architecture {expected:016x}",
            ck.config_hash
        )));
    }
    Ok(())
}

/// Fraction of correctly classified samples, evaluated in batches.
pub fn evaluate<T: Element>(model: &HstModel<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(HstError::config("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<T>(chunk);
        correct += count_correct(&model.forward_classify(&images)?, &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Outcome for one checked scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCheckResult {
    Checked {
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },
    /// The scalar belongs to a frozen parameter.
    NoGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub result: GradCheckResult,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error over checked scalars.
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| match e.result {
                GradCheckResult::Checked { rel_err, .. } => Some(rel_err),
                GradCheckResult::NoGradient => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.result, GradCheckResult::Checked { .. }))
            .count()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Draws `subset` distinct trainable scalars uniformly with a fixed seed.
pub fn sample_trainable<T: Element>(store: &ParamStore<T>, subset: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let flat: Vec<(ParamId, usize)> = store
        .sorted_ids()
        .filter(|&id| store.get(id).trainable())
        .map(|id| (id, store.get(id).numel()))
        .collect();
    let total: usize = flat.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, subset.min(total)).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    let (mut base, mut it) = (0, flat.iter());
    let mut cur = it.next();
    for k in picks {
        while let Some(&(id, n)) = cur {
            if k < base + n {
                out.push((id, k - base));
                break;
            }
            base += n;
            cur = it.next();
        }
    }
    out
}

/// Compares analytic and central-difference gradients of `loss` for each
/// target scalar. `fault` corrupts one backward rule, for testing the check.
pub fn grad_check_with(
    store: &mut ParamStore<f64>,
    targets: &[(ParamId, usize)],
    h: f64,
    fault: Option<BackwardFault>,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let l = loss(&mut g, store)?;
    let grads = g.backward(l)?;
    let analytic: BTreeMap<ParamId, Tensor<f64>> = g.param_grads(&grads).into_iter().collect();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut entries = Vec::with_capacity(targets.len());
    for &(id, index) in targets {
        let name = store.get(id).name().to_string();
        if !store.get(id).trainable() {
            entries.push(GradCheckEntry {
                name,
                index,
                result: GradCheckResult::NoGradient,
            });
            continue;
        }
        let a = analytic.get(&id).map_or(0.0, |t| t.data()[index]);
        let original = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = original + h;
        let plus = eval(store);
        store.value_mut(id).data_mut()[index] = original - h;
        let minus = eval(store);
        store.value_mut(id).data_mut()[index] = original;
        let n = (plus? - minus?) / (2.0 * h);
        entries.push(GradCheckEntry {
            name,
            index,
            result: GradCheckResult::Checked {
                analytic: a,
                numeric: n,
                rel_err: relative_error(a, n),
            },
        });
    }
    Ok(GradCheckReport { entries })
}

/// Gradient check of the classification loss over `subset` uniformly
/// sampled trainable scalars, with `h = 1e-4`.
pub fn grad_check(
    model: &HstModel<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    subset: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let targets = sample_trainable(model.params(), subset, seed);
    grad_check_targets(model, images, labels, &targets, None)
}

/// Gradient check of the classification loss for explicit scalars.
pub fn grad_check_targets(
    model: &HstModel<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    targets: &[(ParamId, usize)],
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let x = model.normalize(images)?;
    let mut store = model.params().clone();
    grad_check_with(&mut store, targets, 1e-4, fault, |g, store| {
        let xv = g.constant(x.clone());
        let logits = model.logits_graph_with(g, store, xv)?;
        g.cross_entropy(logits, labels)
    })
}

/// Result of comparing two checkpoints of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeAudit {
    /// Frozen parameters whose bytes changed. Empty means the policy held.
    pub violations: Vec<String>,
    /// Trainable parameters that changed, as expected of training.
    pub changed_trainable: Vec<String>,
}

impl FreezeAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares parameter bytes of two checkpoints of the architecture `cfg`.
pub fn audit_freeze(cfg: &ModelConfig, before: &Checkpoint, after: &Checkpoint) -> Result<FreezeAudit> {
    let specs = param_specs(cfg)?;
    let expected: Vec<&str> = {
        let mut v: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        v.sort_unstable();
        v
    };
    for (label, ck) in [("before", before), ("after", after)] {
        let names: Vec<&str> = ck.params().map(|(k, _)| k.as_str()).collect();
        if names != expected {
            return Err(HstError::Audit(format!(
                "`{label}` checkpoint manifest does not match the architecture ({} vs {} entries)",
                names.len(),
                expected.len()
            )));
        }
    }
    let mut audit = FreezeAudit::default();
    for spec in &specs {
        let (a, b) = (&before.entries[&spec.name], &after.entries[&spec.name]);
        if a.shape() != b.shape() {
            return Err(HstError::Audit(format!(
                "`{}` changed shape between checkpoints",
                spec.name
            )));
        }
        if !a.bit_eq(b) {
            if spec.trainable {
                audit.changed_trainable.push(spec.name.clone());
            } else {
                audit.violations.push(spec.name.clone());
            }
        }
    }
    audit.violations.sort();
    audit.changed_trainable.sort();
    Ok(audit)
}
