use std::path::Path;

use ftrl_core::checkpoint::Checkpoint;
use ftrl_core::data::{
    encode_record, load_cifar10, split, synthetic_gratings, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use ftrl_core::dft::{DftDims, Formulation, TargetSpec};
use ftrl_core::models::EncoderConfig;
use ftrl_core::trainer::{embed, linear_probe, pretrain, Phase, ProbeConfig, TargetKind, TrainConfig};
use ftrl_core::Error;

fn write_fake_cifar(dir: &Path, per_file: usize) {
    let mut counter = 0u32;
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        let mut bytes = Vec::new();
        for _ in 0..per_file {
            let pixels: Vec<u8> = (0..CIFAR_RECORD - 1).map(|p| ((p as u32 + counter * 31) % 251) as u8).collect();
            bytes.extend(encode_record((counter % 10) as u8, &pixels));
            counter += 1;
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn cifar_directory_loads_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_cifar(dir.path(), 4);
    let (pool, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!(pool.len(), 20);
    assert_eq!(test.len(), 4);
    assert_eq!(pool.image_shape(), [3, 32, 32]);
    assert_eq!(pool.labels(), (0..20).map(|i| i % 10).collect::<Vec<_>>());
    assert_eq!(test.label(0), 0);
    // second record of the first file: pixel p = (p + 31) % 251
    assert_eq!(pool.raw_image(1)[0], 31);
    assert_eq!(pool.raw_image(1)[300], ((300 + 31) % 251) as u8);
}

#[test]
fn truncated_cifar_file_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_cifar(dir.path(), 2);
    let path = dir.path().join(CIFAR_TRAIN_FILES[2]);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..CIFAR_RECORD + 100]).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::Truncated { path: p, offset, expected }) => {
            assert_eq!(p, path);
            assert_eq!(offset, CIFAR_RECORD as u64);
            assert_eq!(expected, (CIFAR_RECORD - 100) as u64);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_cifar_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cifar10(dir.path()), Err(Error::Io { .. })));
}

fn small_config(target: TargetKind, sequential: bool) -> TrainConfig {
    TrainConfig {
        target,
        sequential,
        epochs: 2,
        batch_size: 16,
        encoder: EncoderConfig {
            widths: vec![4, 8],
            embedding_dim: 8,
            ..EncoderConfig::compact([3, 8, 8])
        },
        decoder_hidden: [16, 16, 16],
        ..TrainConfig::default()
    }
}

#[test]
fn pretrain_checkpoint_probe_round_trip() {
    let data = synthetic_gratings(80, [3, 8, 8], 3).unwrap();
    let (train, val) = split(&data, 0.25, 0).unwrap();
    let cfg = small_config(TargetKind::Dft(TargetSpec::new(DftDims::Two, Formulation::Magnitude)), true);
    let (model, metrics) = pretrain(&cfg, &train).unwrap();
    assert_eq!(metrics.losses(Phase::Pretrain).len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ftrl");
    Checkpoint::from_model(&model).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().load_encoder().unwrap();

    let a = embed(&model.encoder, &val).unwrap();
    let b = embed(&restored, &val).unwrap();
    // parameters are stored at single precision
    let scale = a.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(a.max_abs_diff(&b).unwrap() / scale < 1e-5);

    let before = Checkpoint::from_model(&model);
    let probe = linear_probe(&restored, &train, &val, None, &ProbeConfig::default()).unwrap();
    assert_eq!(probe.metrics.records.len(), 3);
    assert!(probe.metrics.records.iter().all(|r| r.phase == Phase::Probe));
    assert_eq!(Checkpoint::from_model(&model), before);
}

#[test]
fn reruns_are_bitwise_identical() {
    let data = synthetic_gratings(48, [3, 8, 8], 5).unwrap();
    for (target, seq) in [
        (TargetKind::Pixels, false),
        (TargetKind::Dft(TargetSpec::new(DftDims::Three, Formulation::MagPhase)), true),
    ] {
        let cfg = small_config(target, seq);
        let (_, a) = pretrain(&cfg, &data).unwrap();
        let (_, b) = pretrain(&cfg, &data).unwrap();
        let bits = |m: &ftrl_core::trainer::RunMetrics| {
            m.losses(Phase::Pretrain).iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
