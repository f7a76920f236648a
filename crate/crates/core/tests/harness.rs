use std::sync::OnceLock;

use bmfl::data::{generate_dataset, LabeledImages};
use bmfl::harness::{
    evaluate, pretrain_backbones, standard_splits, train, BmflModel, Checkpoint, RunConfig, Variant,
};
use bmfl::numerics::ParamStore;
use bmfl::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_kv(
        "data.samples_per_class = 12
         data.val_per_class = 4
         image.d_v = 16
         image.depth = 1
         image.heads = 2
         brain_encoder.d_in = 16
         brain_encoder.d_model = 16
         brain_encoder.heads = 2
         brain_encoder.depth = 1
         brain_transformer.d_b = 16
         brain_transformer.depth = 1
         brain_transformer.heads = 2
         fusion.d_f = 16
         image_pretrain.epochs = 2
         brain_pretrain.epochs = 2
         batch_size = 16
         epochs = 2
         schedule.peak_lr = 3e-3",
    )
    .unwrap();
    cfg
}

struct Fixture {
    cfg: RunConfig,
    train: LabeledImages,
    val: LabeledImages,
    backbones: ParamStore,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let (train, val) = generate_dataset(&cfg.data).unwrap();
        let (backbones, _, _) = pretrain_backbones(&cfg, &train, None).unwrap();
        Fixture {
            cfg,
            train,
            val,
            backbones,
        }
    })
}

fn run(cfg: &RunConfig) -> bmfl::harness::TrainResult {
    let f = fixture();
    train(cfg, BmflModel::build(cfg, &f.backbones).unwrap(), &f.train).unwrap()
}

#[test]
fn identical_configs_give_identical_checkpoints_and_reports() {
    let f = fixture();
    let a = run(&f.cfg);
    let b = run(&f.cfg);
    let (ca, cb) = (a.checkpoint(&f.cfg), b.checkpoint(&f.cfg));
    assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());
    let splits = standard_splits(&f.cfg, &f.val).unwrap();
    assert_eq!(evaluate(&a.model, &splits).unwrap(), evaluate(&b.model, &splits).unwrap());
    let mut other = f.cfg.clone();
    other.seed = 1;
    assert!(!run(&other).model.store.bitwise_eq(&a.model.store));
}

#[test]
fn logged_total_is_the_weighted_sum_on_every_step() {
    let f = fixture();
    let r = run(&f.cfg);
    let alpha = f.cfg.loss.alpha;
    assert_eq!(r.log.len(), 2 * f.train.len().div_ceil(16));
    for s in &r.log {
        assert!((s.l_total - (s.l_cls + alpha * s.l_fusion)).abs() <= 1e-6, "{s:?}");
    }
    // Untrained head: close to uniform over 8 classes.
    assert!((r.log[0].l_cls - 8f64.ln()).abs() < 0.1, "{}", r.log[0].l_cls);
    assert_eq!(r.log[0].lr, f.cfg.schedule.peak_lr / (1.5f64 * 6.0).ceil());
}

#[test]
fn zero_alpha_and_disabled_fusion_loss_train_identically() {
    let f = fixture();
    let mut zero = f.cfg.clone();
    zero.loss.alpha = 0.0;
    let off = f.cfg.with_variant(Variant::NoFusionLoss);
    let (a, b) = (run(&zero), run(&off));
    assert!(a.model.store.bitwise_eq(&b.model.store));
    assert!(a.optimizer.bitwise_eq(&b.optimizer));
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        assert_eq!(x.l_total, x.l_cls);
    }
    assert!(!a.model.store.bitwise_eq(&run(&f.cfg).model.store));
}

#[test]
fn optimizer_never_sees_frozen_backbones() {
    let f = fixture();
    let r = run(&f.cfg);
    assert!(!r.optimizer.names.is_empty());
    for n in &r.optimizer.names {
        assert!(n.starts_with("brain_transformer.") || n.starts_with("fusion."), "{n}");
    }
    for (_, name, t) in f.backbones.iter() {
        assert_eq!(r.model.store.by_name(name).unwrap().data(), t.data(), "{name} moved");
    }
}

#[test]
fn evaluation_ignores_sample_order() {
    let f = fixture();
    let r = run(&f.cfg);
    let splits = standard_splits(&f.cfg, &f.val).unwrap();
    let rev: Vec<usize> = (0..f.val.len()).rev().collect();
    let permuted: Vec<(String, LabeledImages)> = splits.iter().map(|(n, d)| (n.clone(), d.subset(&rev))).collect();
    let a = evaluate(&r.model, &splits).unwrap();
    assert_eq!(a, evaluate(&r.model, &permuted).unwrap());
    assert_eq!(a.rows.len(), 3);
    for row in &a.rows {
        assert!((0.0..=1.0).contains(&row.accuracy));
        assert!(row.pcc_mean.is_some());
    }
}

#[test]
fn checkpoint_reload_reproduces_the_report() {
    let f = fixture();
    let r = run(&f.cfg);
    let bytes = r.checkpoint(&f.cfg).to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let model = BmflModel::from_checkpoint(&ck).unwrap();
    let splits = standard_splits(&f.cfg, &f.val).unwrap();
    assert_eq!(evaluate(&model, &splits).unwrap(), evaluate(&r.model, &splits).unwrap());
}

#[test]
fn class_count_mismatch_is_a_configuration_error() {
    let f = fixture();
    let r = run(&f.cfg);
    let mut val = f.val.clone();
    val.num_classes = 5;
    let err = evaluate(&r.model, &[("clean_val".into(), val)]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(matches!(evaluate(&r.model, &[]), Err(Error::Input(_))));
}

#[test]
fn non_finite_loss_aborts_with_the_step_index() {
    let f = fixture();
    let mut model = BmflModel::build(&f.cfg, &f.backbones).unwrap();
    let id = model.store.id("fusion.classifier.bias").unwrap();
    model.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = train(&f.cfg, model, &f.train).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert!(err.to_string().contains("step 1"), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn variants_train_and_drop_their_groups() {
    let f = fixture();
    for v in [Variant::NoFmri, Variant::NoCrossAttention, Variant::Lvc] {
        let cfg = f.cfg.with_variant(v);
        let r = run(&cfg);
        let groups: std::collections::HashMap<_, _> = r.model.group_sizes().into_iter().collect();
        match v {
            Variant::NoFmri => assert_eq!(groups["brain_transformer"], 0),
            _ => assert!(groups["brain_transformer"] > 0),
        }
        let fused = r.log.iter().any(|s| s.l_fusion != 0.0);
        assert_eq!(fused, v == Variant::Lvc, "{v:?}");
    }
}
