mod common;

use common::rng;
use hst_core::config::TrainConfig;
use hst_core::data::{generate, SyntheticSpec};
use hst_core::param::ParamKind;
use hst_core::tensor::BackwardFault;
use hst_core::trainer::{
    audit_freeze, backward_batch, grad_check, grad_check_targets, AdamW, GradCheckResult, Trainer,
};
use hst_core::{Checkpoint, Dataset, HstError, HstModel, ModelConfig, ParamStore, Tensor};
use rand::Rng;

/// A cut-down architecture so a step takes milliseconds.
fn small() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.embed_dim = 32;
    cfg.backbone.depth = 4;
    cfg.backbone.num_heads = 2;
    cfg.hsn.stage_dims = [8, 16, 16, 32];
    cfg
}

fn data(per_class: usize, seed: u64) -> Dataset {
    generate(&SyntheticSpec {
        num_classes: 10,
        samples_per_class: per_class,
        image_size: 32,
        patch_size: 4,
        noise_std: 0.1,
        seed,
    })
    .unwrap()
}

fn train_cfg(batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        ..Default::default()
    }
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let d = data(4, 0);
    let model = HstModel::<f32>::new(&small(), 0).unwrap();
    let mut t = Trainer::new(model, &train_cfg(8)).unwrap();
    let mut losses = Vec::new();
    t.fit(&d, 40, |_, r| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 200);
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[150..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "first-50 mean {first}, last-50 mean {last}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = data(1, 1);
    let model = HstModel::<f32>::new(&small(), 0).unwrap();
    let mut t = Trainer::new(model, &train_cfg(10)).unwrap();
    let before = t.model.params().clone();
    let (x, y) = d.all::<f32>();
    for _ in 0..3 {
        t.train_step_with_lr(&x, &y, 0.0).unwrap();
    }
    for ((_, a), (_, b)) in before.iter().zip(t.model.params().iter()) {
        assert!(a.value().bit_eq(b.value()), "{} moved", a.name());
    }
}

#[test]
fn training_is_deterministic() {
    let d = data(2, 2);
    let run = || {
        let model = HstModel::<f32>::new(&small(), 5).unwrap();
        let mut t = Trainer::new(model, &train_cfg(6)).unwrap();
        t.fit(&d, 2, |_, _| Ok(())).unwrap();
        t.checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn step_record_reports_trainable_count() {
    let d = data(1, 3);
    let model = HstModel::<f32>::new(&small(), 0).unwrap();
    let expected = model.params().trainable_count();
    let mut t = Trainer::new(model, &train_cfg(10)).unwrap();
    let (x, y) = d.all::<f32>();
    let rec = t.train_step(&x, &y).unwrap();
    assert_eq!(rec.step, 1);
    assert_eq!(rec.trainable_params, expected);
    assert!(rec.to_string().contains(&format!("trainable_param_count={expected}")));
}

// ----- gradient check ------------------------------------------------------------

fn check_batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng(seed);
    (
        Tensor::from_fn(vec![2, 3, 32, 32], |_| r.random_range(0.0..1.0)),
        vec![3, 8],
    )
}

#[test]
fn grad_check_passes_on_sampled_scalars() {
    let model = HstModel::<f64>::new(&small(), 1).unwrap();
    let (x, y) = check_batch(1);
    let report = grad_check(&model, &x, &y, 60, 0).unwrap();
    assert_eq!(report.checked(), 60);
    assert!(report.max_rel_err() < 1e-3, "{}", report.max_rel_err());
}

#[test]
fn frozen_targets_report_no_gradient() {
    let model = HstModel::<f64>::new(&small(), 1).unwrap();
    let (x, y) = check_batch(2);
    let id = model.params().id("backbone.block0.attn.qkv.weight").unwrap();
    let report = grad_check_targets(&model, &x, &y, &[(id, 0), (id, 5)], None).unwrap();
    assert!(report.entries.iter().all(|e| e.result == GradCheckResult::NoGradient));
    assert_eq!(report.checked(), 0);
}

#[test]
fn injected_backward_fault_is_caught() {
    let model = HstModel::<f64>::new(&small(), 1).unwrap();
    let (x, y) = check_batch(3);
    // the stem's first convolution sits upstream of a GELU
    let id = model.params().id("side.stem.conv1.weight").unwrap();
    let targets: Vec<_> = (0..20).map(|j| (id, j)).collect();
    let clean = grad_check_targets(&model, &x, &y, &targets, None).unwrap();
    assert!(clean.max_rel_err() < 1e-3);
    let faulty = grad_check_targets(&model, &x, &y, &targets, Some(BackwardFault::HalfGeluGradient)).unwrap();
    assert!(faulty.max_rel_err() > 0.1, "{}", faulty.max_rel_err());
}

// ----- freeze audit ---------------------------------------------------------------

#[test]
fn audit_after_training_is_clean_and_sees_norm_updates() {
    let cfg = small();
    let d = data(1, 4);
    let model = HstModel::<f32>::new(&cfg, 0).unwrap();
    let mut t = Trainer::new(model, &train_cfg(5)).unwrap();
    let before = Checkpoint::from_params(cfg.hash(), 0, t.model.params());
    t.fit(&d, 2, |_, _| Ok(())).unwrap();
    let after = t.checkpoint();
    let audit = audit_freeze(&cfg, &before, &after).unwrap();
    assert!(audit.is_clean(), "{:?}", audit.violations);
    for name in [
        "backbone.block0.ln1.gamma",
        "backbone.block3.ln2.beta",
        "backbone.meta_tokens",
        "head.weight",
    ] {
        assert!(
            audit.changed_trainable.iter().any(|n| n == name),
            "{name} did not change"
        );
    }
}

#[test]
fn audit_flags_a_modified_frozen_parameter() {
    let cfg = small();
    let mut model = HstModel::<f32>::new(&cfg, 0).unwrap();
    let before = Checkpoint::from_params(cfg.hash(), 0, model.params());
    let id = model.params().id("backbone.block2.mlp.fc1.weight").unwrap();
    let v = &mut model.params_mut().value_mut(id).data_mut()[17];
    *v = f32::from_bits(v.to_bits() ^ 1);
    let after = Checkpoint::from_params(cfg.hash(), 0, model.params());
    let audit = audit_freeze(&cfg, &before, &after).unwrap();
    assert_eq!(audit.violations, ["backbone.block2.mlp.fc1.weight"]);
    assert!(!audit.is_clean());
}

#[test]
fn audit_rejects_a_foreign_manifest() {
    let cfg = small();
    let mut other = cfg.clone();
    other.toggles.weight_sharing = false;
    let a = Checkpoint::from_params(cfg.hash(), 0, HstModel::<f32>::new(&cfg, 0).unwrap().params());
    let b = Checkpoint::from_params(other.hash(), 0, HstModel::<f32>::new(&other, 0).unwrap().params());
    assert!(matches!(audit_freeze(&cfg, &a, &b), Err(HstError::Audit(_))));
}

// ----- AdamW ----------------------------------------------------------------------

#[test]
fn adamw_matches_hand_computed_updates() {
    let cfg = TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.2,
        beta1: 0.8,
        beta2: 0.9,
        adam_eps: 1e-8,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let w = store
        .add(
            "w",
            Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap(),
            ParamKind::Weight,
            true,
        )
        .unwrap();
    let b = store
        .add("b", Tensor::from_f64([2], &[0.3, -0.7]).unwrap(), ParamKind::Bias, true)
        .unwrap();
    let n = store
        .add("n", Tensor::from_f64([1], &[1.0]).unwrap(), ParamKind::Norm, true)
        .unwrap();
    let f = store
        .add("f", Tensor::from_f64([1], &[4.0]).unwrap(), ParamKind::Weight, false)
        .unwrap();
    let mut opt = AdamW::new(&cfg, &store);
    assert_eq!(opt.managed_names(), ["b", "n", "w"]);

    let grads = [[0.5, -1.0, 2.0].as_slice(), &[0.1, 0.0], &[-3.0]];
    let grads2 = [[1.0, 1.0, -1.0].as_slice(), &[0.2, 0.4], &[0.5]];
    let mut want: Vec<Vec<f64>> = vec![vec![1.0, -2.0, 0.5], vec![0.3, -0.7], vec![1.0]];
    let mut m: Vec<Vec<f64>> = want.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut v = m.clone();
    let decays = [true, false, false];
    for (step, gs) in [grads, grads2].iter().enumerate() {
        let t = (step + 1) as i32;
        for (k, id) in [w, b, n].into_iter().enumerate() {
            store
                .accumulate_grad(id, &Tensor::from_f64([gs[k].len()], gs[k]).unwrap())
                .unwrap();
            for (i, &gi) in gs[k].iter().enumerate() {
                let p = &mut want[k][i];
                if decays[k] {
                    *p -= 0.1 * 0.2 * *p;
                }
                m[k][i] = 0.8 * m[k][i] + 0.2 * gi;
                v[k][i] = 0.9 * v[k][i] + 0.1 * gi * gi;
                let mh = m[k][i] / (1.0 - 0.8f64.powi(t));
                let vh = v[k][i] / (1.0 - 0.9f64.powi(t));
                *p -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        opt.update(&mut store, 0.1).unwrap();
        store.zero_grad();
        for (k, id) in [w, b, n].into_iter().enumerate() {
            for (got, exp) in store.value(id).data().iter().zip(&want[k]) {
                assert!((got - exp).abs() < 1e-12, "step {t} param {k}: {got} vs {exp}");
            }
        }
    }
    assert_eq!(store.value(f).data(), [4.0]);
    assert_eq!(opt.step_count(), 2);
    assert!((opt.first_moment("w").unwrap().data()[0] - m[0][0]).abs() < 1e-15);
}

#[test]
fn decay_exempts_norms_biases_and_tokens() {
    assert!(ParamKind::Weight.decays());
    for k in [ParamKind::Bias, ParamKind::Norm, ParamKind::Token] {
        assert!(!k.decays());
    }
    // zero gradients: only weights shrink
    let cfg = TrainConfig {
        weight_decay: 0.5,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = [ParamKind::Weight, ParamKind::Bias, ParamKind::Norm, ParamKind::Token]
        .into_iter()
        .enumerate()
        .map(|(i, k)| store.add(format!("p{i}"), Tensor::full([2], 1.0), k, true).unwrap())
        .collect();
    let mut opt = AdamW::new(&cfg, &store);
    opt.update(&mut store, 0.1).unwrap();
    assert_eq!(store.value(ids[0]).data(), [0.95, 0.95]);
    for &id in &ids[1..] {
        assert_eq!(store.value(id).data(), [1.0, 1.0]);
    }
}

#[test]
fn optimizer_manages_exactly_the_trainable_set() {
    let model = HstModel::<f32>::new(&small(), 0).unwrap();
    let t = Trainer::new(model, &train_cfg(4)).unwrap();
    assert_eq!(t.optim.managed_names(), t.model.params().trainable_names());
}

#[test]
fn batch_gradient_is_order_invariant() {
    let mut model = HstModel::<f64>::new(&small(), 2).unwrap();
    let d = data(1, 5);
    let (x, y) = d.batch::<f64>(&[0, 1, 2, 3]);
    let (xp, yp) = d.batch::<f64>(&[2, 0, 3, 1]);
    let (la, _) = backward_batch(&mut model, &x, &y).unwrap();
    let ga: Vec<_> = model.params().iter().filter_map(|(_, p)| p.grad().cloned()).collect();
    let (lb, _) = backward_batch(&mut model, &xp, &yp).unwrap();
    let gb: Vec<_> = model.params().iter().filter_map(|(_, p)| p.grad().cloned()).collect();
    assert!((la - lb).abs() < 1e-12);
    assert_eq!(ga.len(), gb.len());
    for (a, b) in ga.iter().zip(&gb) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn non_finite_loss_names_the_culprits() {
    let mut model = HstModel::<f32>::new(&small(), 0).unwrap();
    let id = model.params().id("side.stage1.block0.attn.q.weight").unwrap();
    model.params_mut().value_mut(id).data_mut()[0] = f32::NAN;
    let d = data(1, 6);
    let (x, y) = d.batch::<f32>(&[0, 1]);
    match backward_batch(&mut model, &x, &y) {
        Err(HstError::NonFinite { loss, offending }) => {
            assert!(loss.is_nan());
            assert!(
                offending.contains(&"side.stage1.block0.attn.q.weight".to_string()),
                "{offending:?}"
            );
            assert!(offending.contains(&"logits".to_string()));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn cosine_schedule_reaches_zero() {
    let d = data(1, 7);
    let model = HstModel::<f32>::new(&small(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        cosine_decay: true,
        ..Default::default()
    };
    let mut t = Trainer::new(model, &cfg).unwrap();
    let mut lrs = Vec::new();
    t.fit(&d, 2, |_, r| {
        lrs.push(r.lr);
        Ok(())
    })
    .unwrap();
    assert_eq!(lrs.len(), 4);
    assert_eq!(lrs[0], 1e-3);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert!((lrs[2] - 0.5e-3).abs() < 1e-15);
}
