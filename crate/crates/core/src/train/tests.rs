use super::*;
use crate::data::{make_synthetic, SyntheticConfig};

fn toy_dataset() -> DatasetDescriptor {
    make_synthetic(&SyntheticConfig {
        num_images: 10,
        canvas: (40, 40),
        radius_range: (6.0, 10.0),
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn toy_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        backbone: BackboneSpec::TinyCnn {
            widths: vec![4, 8],
            stride: 4,
        },
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.01,
        augmentation: AugmentationConfig {
            rescale_range: (28, 40),
            crop_size: 32,
            hflip_prob: 0.5,
        },
        out_dir: dir.to_path_buf(),
        log_interval: 1,
        deterministic: true,
        ..Default::default()
    }
}

#[test]
fn cls_only_logs_zero_puzzle_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        toggles: LossToggles {
            enable_p_cls: false,
            enable_re: false,
        },
        ..toy_config(dir.path())
    };
    let out = train(&cfg, &toy_dataset()).unwrap();
    assert_eq!(out.records.len(), 3);
    for r in &out.records {
        assert_eq!(r.losses.p_cls, 0.0);
        assert_eq!(r.losses.re, 0.0);
        assert!(r.losses.cls > 0.0);
    }
    assert!(out.checkpoint.is_file());
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let ds = toy_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&toy_config(a.path()), &ds).unwrap();
    let rb = train(&toy_config(b.path()), &ds).unwrap();
    assert_eq!(fs::read(&ra.log).unwrap(), fs::read(&rb.log).unwrap());
    assert_eq!(fs::read(&ra.checkpoint).unwrap(), fs::read(&rb.checkpoint).unwrap());
}

#[test]
fn parallel_and_sequential_agree() {
    let ds = toy_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let seq = train(&toy_config(a.path()), &ds).unwrap();
    let cfg = TrainConfig {
        deterministic: false,
        ..toy_config(b.path())
    };
    let par = train(&cfg, &ds).unwrap();
    assert_eq!(fs::read(&seq.checkpoint).unwrap(), fs::read(&par.checkpoint).unwrap());
    assert!(par.records.iter().all(|r| r.wall_time.is_some()));
    assert!(seq.records.iter().all(|r| r.wall_time.is_none()));
}

#[test]
fn logged_alpha_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = train(&cfg, &toy_dataset()).unwrap();
    let total = cfg.steps_per_epoch(10) * cfg.epochs;
    assert_eq!(out.records.len(), total);
    for r in read_log(&out.log).unwrap() {
        assert_eq!(r.alpha, alpha_at(r.step, total, &cfg.alpha));
        assert_eq!(r.losses.alpha, r.alpha);
        let want = r.losses.cls + r.losses.p_cls + r.alpha * r.losses.re;
        assert!((r.losses.total - want).abs() < 1e-9);
    }
}

#[test]
fn training_keeps_the_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let fresh = Classifier::<f32>::new(cfg.backbone.clone(), 3, 0).unwrap();
    let out = train(&cfg, &toy_dataset()).unwrap();
    assert_eq!(out.model.num_parameters(), fresh.num_parameters());
}

#[test]
fn non_finite_loss_is_a_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let mut model = Classifier::<f32>::new(cfg.backbone.clone(), 3, 0).unwrap();
    for mut p in model.parameters_mut() {
        p.mapv_inplace(|v| v * 1e30);
    }
    match train_model(model, &cfg, &toy_dataset()) {
        Err(Error::Divergence { step, last_good, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(last_good, None);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn every_epoch_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&toy_config(dir.path()), &toy_dataset()).unwrap();
    let last_good = Classifier::<f32>::from_checkpoint(dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert_eq!(last_good.head(), out.model.head());
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(5, 0, 50);
    assert_eq!(a, epoch_order(5, 0, 50));
    assert_ne!(a, epoch_order(5, 1, 50));
    assert_ne!(a, epoch_order(6, 0, 50));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset();
    let base = toy_config(dir.path());
    for bad in [
        TrainConfig {
            epochs: 0,
            ..base.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..base.clone()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..base.clone()
        },
        TrainConfig {
            augmentation: AugmentationConfig {
                crop_size: 4,
                ..base.augmentation.clone()
            },
            ..base.clone()
        },
    ] {
        assert!(matches!(train(&bad, &ds), Err(Error::Config(_))));
    }
}

#[test]
fn ablation_has_four_rows_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..toy_config(dir.path())
    };
    let eval = EvalSettings {
        inference: crate::infer::InferenceConfig {
            scales: vec![1.0],
            ..Default::default()
        },
        ..Default::default()
    };
    let table = run_ablation(&cfg, &toy_dataset(), &eval, &ABLATION_ROWS).unwrap();
    assert_eq!(table.rows.len(), 4);
    let marks: Vec<(bool, bool)> = table
        .rows
        .iter()
        .map(|r| (r.toggles.enable_p_cls, r.toggles.enable_re))
        .collect();
    assert_eq!(marks, vec![(false, false), (true, false), (false, true), (true, true)]);
    let hashes: std::collections::HashSet<_> = table.rows.iter().map(|r| r.config_hash.clone()).collect();
    assert_eq!(hashes.len(), 4);
    assert!(table
        .rows
        .iter()
        .all(|r| r.seed == cfg.seed && (0.0..=1.0).contains(&r.miou)));
    assert_eq!(table.to_csv().lines().count(), 5);
    assert!(dir.path().join("cls+p_cls+re").join(FINAL_CHECKPOINT).is_file());
}
