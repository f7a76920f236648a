use bmfl::data::{generate_dataset, LinearProbe, ProbeOptions, SyntheticDatasetSpec};

#[test]
fn raw_pixel_probe_is_learnable_but_not_trivial() {
    let (train, val) = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
    let feats = |ds: &bmfl::data::LabeledImages| -> Vec<Vec<f32>> {
        ds.images.iter().map(|t| t.data().to_vec()).collect()
    };
    let opts = ProbeOptions { epochs: 100, lr: 0.2, l2: 1e-3 };
    let probe = LinearProbe::fit(&feats(&train), &train.labels, 8, opts).unwrap();
    let train_acc = probe.accuracy(&feats(&train), &train.labels);
    let val_acc = probe.accuracy(&feats(&val), &val.labels);
    eprintln!("probe train {train_acc:.3} val {val_acc:.3}");
    assert!(val_acc >= 0.70, "val {val_acc}");
}
