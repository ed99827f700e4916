use tam_core::arch::{NetConfig, TemporalModuleKind};
use tam_core::blocks::build_network;
use tam_core::checkpoint;
use tam_core::synth::{generate, DatasetSpec, Split};
use tam_core::{Mode, TamError};

#[test]
fn saved_weights_reproduce_predictions() {
    let cfg = NetConfig::toy(TemporalModuleKind::Tam);
    let model = build_network::<f32>(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tamc");
    checkpoint::save(&path, &model.params).unwrap();
    let loaded = checkpoint::load::<f32>(&path).unwrap();
    let mut other = build_network::<f32>(&cfg, 12).unwrap();
    assert_ne!(other.params, model.params);
    checkpoint::restore(&mut other.params, &loaded).unwrap();
    let spec = DatasetSpec { train_count: 4, val_count: 4, ..DatasetSpec::default() };
    let (x, _) = generate(&spec, Split::Val).unwrap().batch::<f32>(&[0, 1, 2, 3], 0, 8).unwrap();
    let a = model.predict(&x, Mode::Eval).unwrap();
    let b = other.predict(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(checkpoint::to_bytes(&other.params), std::fs::read(&path).unwrap());
}

#[test]
fn loading_into_a_different_architecture_names_the_problem() {
    let tanet = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::Tam), 0).unwrap();
    let mut c2d = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::None), 0).unwrap();
    let err = checkpoint::restore(&mut c2d.params, &tanet.params).unwrap_err();
    assert!(matches!(err, TamError::CheckpointMismatch { .. }), "{err}");
}

#[test]
fn precision_mismatch_is_rejected() {
    let model = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::Tam), 0).unwrap();
    let bytes = checkpoint::to_bytes(&model.params);
    assert!(checkpoint::from_bytes::<f64>(&bytes).is_err());
    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    assert!(checkpoint::from_bytes::<f32>(&truncated).is_err());
}
