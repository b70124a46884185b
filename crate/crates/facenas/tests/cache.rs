use facenas::cache::{encode_dataset, load, save};
use facenas_core::spectral::PipelineConfig;
use facenas_core::synth::{generate, SyntheticSpec};

#[test]
fn encoded_clips_reload_exactly() {
    let spec = SyntheticSpec {
        num_clips: 6,
        min_frames: 60,
        max_frames: 80,
        ..SyntheticSpec::default()
    };
    let cfg = PipelineConfig {
        k: 12,
        ..PipelineConfig::default()
    };
    let (clips, rejected) = encode_dataset(&generate(&spec).unwrap(), &cfg, &spec.layout);
    assert!(rejected.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoded.ckpt");
    save(&path, &clips).unwrap();
    assert_eq!(load(&path, &spec.layout).unwrap(), clips);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(load(&path, &spec.layout).is_err());
}
