use hst_core::checkpoint::AnyTensor;
use hst_core::config::TrainConfig;
use hst_core::data::{generate, SyntheticSpec};
use hst_core::param::ParamKind;
use hst_core::trainer::Trainer;
use hst_core::{Checkpoint, HstError, HstModel, ModelConfig, ParamStore, Tensor};

/// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

fn entry(out: &mut Vec<u8>, name: &str, tag: u8, shape: &[u64], data: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for e in shape {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(data);
}

fn file(hash: u64, step: u64, count: u32, body: &[u8]) -> Vec<u8> {
    let mut out = b"HSTC".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&hash.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32(body).to_le_bytes());
    out
}

fn sample() -> Checkpoint {
    let mut ck = Checkpoint::new(0x0123_4567_89ab_cdef, 42);
    ck.insert("b", &Tensor::<f64>::from_f64([2], &[-0.0, 1.5]).unwrap());
    ck.insert(
        "a",
        &Tensor::<f32>::new([2, 1], vec![f32::from_bits(0x7fc0_0001), -3.25]).unwrap(),
    );
    ck.insert("s", &Tensor::<f64>::scalar(7.0));
    ck
}

#[test]
fn layout_matches_a_hand_built_file() {
    let mut body = Vec::new();
    let a: Vec<u8> = [0x7fc0_0001u32, (-3.25f32).to_bits()]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    entry(&mut body, "a", 0, &[2, 1], &a);
    let b: Vec<u8> = [-0.0f64, 1.5].iter().flat_map(|v| v.to_le_bytes()).collect();
    entry(&mut body, "b", 1, &[2], &b);
    entry(&mut body, "s", 1, &[], &7.0f64.to_le_bytes());
    let want = file(0x0123_4567_89ab_cdef, 42, 3, &body);
    assert_eq!(sample().to_bytes(), want);
}

#[test]
fn round_trip_is_bit_exact() {
    let ck = sample();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!((back.config_hash, back.step), (ck.config_hash, ck.step));
    assert_eq!(back.entries.len(), 3);
    for (k, v) in &ck.entries {
        assert!(v.bit_eq(&back.entries[k]), "{k}");
    }
    match &back.entries["a"] {
        AnyTensor::F32(t) => assert_eq!(t.data()[0].to_bits(), 0x7fc0_0001),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.hstc");
    ck.write(&path).unwrap();
    assert_eq!(Checkpoint::read(&path).unwrap().to_bytes(), ck.to_bytes());
}

#[test]
fn model_parameters_survive_a_round_trip() {
    let cfg = ModelConfig::default();
    let model = HstModel::<f32>::new(&cfg, 3).unwrap();
    let ck = Checkpoint::from_params(cfg.hash(), 0, model.params());
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let mut fresh = HstModel::<f32>::new(&cfg, 99).unwrap();
    back.load_into(fresh.params_mut()).unwrap();
    for ((_, a), (_, b)) in model.params().iter().zip(fresh.params().iter()) {
        assert!(a.value().bit_eq(b.value()), "{}", a.name());
    }
    let names: Vec<&String> = back.params().map(|(k, _)| k).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn flipped_payload_bit_is_a_checksum_error() {
    let bytes = sample().to_bytes();
    for at in [28, 40, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        match Checkpoint::from_bytes(&bad) {
            Err(HstError::Corrupt {
                offset,
                stored,
                computed,
            }) => {
                assert_eq!(offset, (bytes.len() - 4) as u64);
                assert_ne!(stored, computed);
            }
            other => panic!("byte {at}: expected corruption, got {other:?}"),
        }
    }
}

#[test]
fn malformed_files_are_format_errors() {
    let bytes = sample().to_bytes();
    let fmt = |b: &[u8]| match Checkpoint::from_bytes(b) {
        Err(HstError::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    assert_eq!(fmt(&bytes[..10]), 10);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(fmt(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert_eq!(fmt(&bad), 4);

    // out of order, with a valid checksum
    let mut body = Vec::new();
    entry(&mut body, "z", 1, &[], &1.0f64.to_le_bytes());
    let second = body.len() + 28;
    entry(&mut body, "a", 1, &[], &1.0f64.to_le_bytes());
    assert_eq!(fmt(&file(0, 0, 2, &body)), second as u64);

    // unknown dtype tag
    let mut body = Vec::new();
    entry(&mut body, "a", 7, &[], &1.0f64.to_le_bytes());
    assert_eq!(fmt(&file(0, 0, 1, &body)), 28 + 4 + 1);

    // declared count larger than the payload
    let mut body = Vec::new();
    entry(&mut body, "a", 1, &[], &1.0f64.to_le_bytes());
    assert_eq!(fmt(&file(0, 0, 2, &body)), (28 + body.len()) as u64);
}

#[test]
fn load_checks_names_and_shapes() {
    let mut store = ParamStore::<f64>::new();
    store
        .add("w", Tensor::zeros(vec![2, 2]), ParamKind::Weight, true)
        .unwrap();
    let mut ck = Checkpoint::new(0, 0);
    ck.insert("w", &Tensor::<f64>::zeros(vec![4]));
    assert!(matches!(ck.load_into(&mut store), Err(HstError::Dimension(_))));
    let ck = Checkpoint::new(0, 0);
    assert!(matches!(ck.load_into(&mut store), Err(HstError::Wiring(_))));
    let mut ck = Checkpoint::new(0, 0);
    ck.insert("w", &Tensor::<f32>::full(vec![2, 2], 1.5));
    ck.insert("extra", &Tensor::<f32>::zeros(vec![1]));
    assert!(matches!(ck.load_into(&mut store), Err(HstError::Wiring(_))));
    // optimizer entries are not parameters
    let mut ck = Checkpoint::new(0, 0);
    ck.insert("w", &Tensor::<f32>::full(vec![2, 2], 1.5));
    ck.insert("optim.step", &Tensor::<f64>::scalar(3.0));
    ck.load_into(&mut store).unwrap();
    assert_eq!(store.value(store.id("w").unwrap()).data(), [1.5; 4]);
}

#[test]
fn restored_trainer_continues_like_the_original() {
    let mut cfg = ModelConfig::default();
    cfg.backbone.depth = 4;
    cfg.backbone.embed_dim = 32;
    cfg.backbone.num_heads = 2;
    let data = generate(&SyntheticSpec {
        num_classes: 10,
        samples_per_class: 2,
        image_size: 32,
        patch_size: 4,
        noise_std: 0.1,
        seed: 0,
    })
    .unwrap();
    let train = TrainConfig {
        batch_size: 6,
        ..Default::default()
    };
    let mut full = Trainer::new(HstModel::<f32>::new(&cfg, 1).unwrap(), &train).unwrap();
    let mut losses = Vec::new();
    let mut saved = None;
    full.fit(&data, 3, |t, r| {
        losses.push(r.loss);
        if t.step_count() == 5 {
            saved = Some(t.checkpoint().to_bytes());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 12);

    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = Trainer::new(HstModel::<f32>::new(&cfg, 77).unwrap(), &train).unwrap();
    resumed.restore(&ck).unwrap();
    assert_eq!(resumed.step_count(), 5);
    let mut tail = Vec::new();
    resumed
        .fit(&data, 3, |_, r| {
            tail.push(r.loss);
            Ok(())
        })
        .unwrap();
    assert_eq!(tail, losses[5..]);
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());

    let mut other = cfg.clone();
    other.toggles.fg_injection = false;
    let mut wrong = Trainer::new(HstModel::<f32>::new(&other, 0).unwrap(), &train).unwrap();
    assert!(matches!(wrong.restore(&ck), Err(HstError::Config(_))));
}
