use std::path::Path;

use actseg::io::{
    decode_checkpoint, decode_features, encode_checkpoint, encode_features, frames_text,
    parse_labels, segments_text,
};
use actseg::model::{InferOptions, Model, ModelConfig, TrainConfig, TrainSample};
use actseg::segcore::ClassCatalog;
use actseg::synth::{generate, SynthConfig};
use actseg::Error;

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let videos = generate(&SynthConfig::default(), 2).unwrap();
    let data: Vec<TrainSample> = videos
        .iter()
        .map(|v| TrainSample::new(&v.name, v.features.clone(), v.gt.clone()).unwrap())
        .collect();
    let cfg = ModelConfig {
        enc_layers: 2,
        ca_smoothing_kernel: Some(3),
        ..ModelConfig::toy(16, 4)
    };
    let mut model = Model::new(cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::toy()
    };
    model.train_stage1(&data, &tc, |_| {}).unwrap();
    let bytes = encode_checkpoint(&model);
    let restored = decode_checkpoint(&bytes, Path::new("m.ckpt")).unwrap();
    assert_eq!(restored.config(), model.config());
    assert_eq!(restored.params(), model.params());
    let opts = InferOptions::default();
    let a = model.predict(&videos[0].features, &opts).unwrap();
    let b = restored.predict(&videos[0].features, &opts).unwrap();
    assert_eq!(a.segmentation, b.segmentation);
    assert_eq!(encode_checkpoint(&restored), bytes);

    let truncated = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m.ckpt"));
    assert!(matches!(truncated, Err(Error::Format { .. })));
}

#[test]
fn features_round_trip_at_f32_precision() {
    let v = &generate(&SynthConfig::default(), 1).unwrap()[0];
    let back = decode_features(&encode_features(&v.features), Path::new("x.feat")).unwrap();
    assert_eq!(back.frames(), v.features.frames());
    assert_eq!(back.dim(), v.features.dim());
    for (a, b) in back.values().data().iter().zip(v.features.values().data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let text = "0.5,1.5\n-2,3\n";
    let parsed = decode_features(text.as_bytes(), Path::new("x.csv")).unwrap();
    assert_eq!(parsed.values().data(), &[0.5, 1.5, -2.0, 3.0]);
}

#[test]
fn label_layouts_parse_to_the_same_segmentation() {
    let v = &generate(&SynthConfig::default(), 1).unwrap()[0];
    let catalog = ClassCatalog::numbered(4);
    let p = Path::new("labels.txt");
    let from_frames = parse_labels(&frames_text(&v.gt, &catalog), &catalog, p).unwrap();
    let from_segments = parse_labels(&segments_text(&v.gt, &catalog), &catalog, p).unwrap();
    assert_eq!(from_frames, v.gt);
    assert_eq!(from_segments, v.gt);
    assert!(parse_labels("c9\n", &catalog, p).is_err());
}
