use bmfl::data::{generate_dataset, SyntheticDatasetSpec};
use bmfl::fit::PretrainOptions;
use bmfl::image_encoder::{pretrain_image_encoder, ImageEncoder, ImageEncoderConfig};
use bmfl::numerics::{ParamStore, SeedStream};

#[test]
fn warm_up_reaches_high_train_accuracy() {
    let (train, _) = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
    let cfg = ImageEncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, &cfg, SeedStream(0)).unwrap();
    let opts = PretrainOptions::default();
    let t0 = std::time::Instant::now();
    let report = pretrain_image_encoder(&mut store, &enc, &train, &opts).unwrap();
    eprintln!("{report:?} in {:?}", t0.elapsed());
    assert!(report.train_accuracy >= 0.90, "{}", report.train_accuracy);
    assert!(store.trainable().is_empty());
}
