use domexperts::dataset::{dataset_digest, load_dataset};
use domexperts::detector::{AnchorConfig, StageSpec};
use domexperts::evaluation::{compare_reports, emit_report, evaluate, EvalConfig};
use domexperts::experiment::Model;
use domexperts::scenes::{generate_dataset, Balance, SceneSpec, Split};
use domexperts::training::{train_baseline, train_experts, TrainConfig};
use domexperts::{DetectorConfig, DetectorParams, DomainSchema, ExpertDetector};

fn small_config() -> DetectorConfig {
    DetectorConfig {
        stages: StageSpec {
            channels: vec![4, 6, 8, 8],
            input_channels: 1,
        },
        anchors: AnchorConfig {
            sizes: vec![4.0, 8.0, 16.0],
        },
        class_count: 1,
    }
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        focal_length_px: 60.0,
        seed: 21,
        ..SceneSpec::default()
    }
}

#[test]
fn generate_train_save_evaluate_compare() {
    let dir = tempfile::tempdir().unwrap();
    let schema = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
    generate_dataset(&small_scene(), &schema, 30, 15, &Balance::Balanced, dir.path()).unwrap();
    let train = load_dataset(&dir.path().join(Split::Train.dir_name())).unwrap();
    let test = load_dataset(&dir.path().join(Split::Test.dir_name())).unwrap();

    let config = TrainConfig {
        epochs_pretrain: 2,
        epochs_expert: 2,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let init = DetectorParams::init(small_config(), 2).unwrap();
    let (base, base_rec) = train_baseline(&train, init.clone(), &config).unwrap();
    let (expert, expert_rec) = train_experts(&train, init, &schema, 2, &config).unwrap();
    assert_eq!(base_rec.total_steps, expert_rec.total_steps);
    assert_eq!(expert_rec.foreign_images, 0);
    assert_eq!(expert_rec.branch_images.values().sum::<usize>(), 2 * train.len());

    // Saved models evaluate exactly like the in-memory ones.
    let path = dir.path().join("expert.ckpt");
    expert.save(&path).unwrap();
    let loaded = match Model::load(&path, Some(&schema)).unwrap() {
        Model::Expert(m) => m,
        Model::Base(_) => panic!("expert archive loaded as a base model"),
    };
    let eval = EvalConfig {
        iou_thresholds: vec![0.5, 0.7],
        ..EvalConfig::default()
    };
    let r_mem = evaluate("altitude@2", &expert, &test, Some(&schema), &eval).unwrap();
    let r_disk = evaluate("altitude@2", &loaded, &test, Some(&schema), &eval).unwrap();
    assert_eq!(r_mem, r_disk);
    assert!(r_mem.metric("AP70").is_ok());

    let r_base = evaluate("baseline", &base, &test, Some(&schema), &eval).unwrap();
    let written = emit_report(&r_base, &dir.path().join("reports"), "baseline", true).unwrap();
    assert!(written.iter().all(|p| p.is_file()));

    let table = compare_reports(&[r_base.clone(), r_mem.clone()], "baseline", "AP50").unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.row("baseline").unwrap().deltas.iter().all(|d| d.is_none_or(|v| v == 0.0)));
    assert_eq!(table.columns.len(), 5);

    // Reports on a different test set cannot be compared.
    let mut other = r_mem.clone();
    other.model = "other".into();
    other.dataset_digest = "0".repeat(64);
    assert!(compare_reports(&[r_base, other], "baseline", "AP50").is_err());
}

#[test]
fn generation_is_reproducible_on_disk() {
    let schema = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
    let weights = Balance::Imbalanced(vec![0.5, 0.3, 0.2]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&small_scene(), &schema, 20, 10, &weights, a.path()).unwrap();
    generate_dataset(&small_scene(), &schema, 20, 10, &weights, b.path()).unwrap();
    for split in [Split::Train, Split::Test] {
        assert_eq!(
            dataset_digest(&a.path().join(split.dir_name())).unwrap(),
            dataset_digest(&b.path().join(split.dir_name())).unwrap()
        );
    }
}

#[test]
fn expert_checkpoint_rejects_other_schema() {
    let schema = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
    let other = DomainSchema::altitude(5.0, 100.0, 2).unwrap();
    let base = DetectorParams::init(small_config(), 0).unwrap();
    let expert = ExpertDetector::split_model(&base, &schema, 1).unwrap();
    let bytes = expert.to_bytes().unwrap();
    assert!(ExpertDetector::from_bytes(&bytes, Some(&schema)).is_ok());
    let err = ExpertDetector::from_bytes(&bytes, Some(&other)).unwrap_err();
    assert!(err.is_input_error());
}
