use cva_core::attention::Variant;
use cva_core::data::{generate_toy_dataset, write_dataset_dir, DatasetBundle, SynthConfig, Task};
use cva_core::metrics::evaluate;
use cva_core::model::{CvaModel, ModelConfig};
use cva_core::train::{load_checkpoint, samples, save_checkpoint, train, train_steps, TrainConfig};
use cva_core::Error;

fn bundle(task: Task, train: usize, test: usize) -> (tempfile::TempDir, DatasetBundle) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        task,
        train,
        test,
        ..SynthConfig::default()
    };
    write_dataset_dir(dir.path(), &generate_toy_dataset(&cfg).unwrap(), 2000).unwrap();
    let data = DatasetBundle::load(dir.path(), 26).unwrap();
    (dir, data)
}

fn model(cfg: &TrainConfig, data: &DatasetBundle) -> CvaModel {
    let dims = cfg.dims(
        data.questions.len(),
        data.features.channels().unwrap(),
        data.answers.len(),
    );
    CvaModel::new(ModelConfig::new(dims, cfg.variant), cfg.seed).unwrap()
}

#[test]
fn memorizes_a_single_example() {
    let (_dir, data) = bundle(Task::Spatial, 1, 0);
    let set = samples(&data.train, &data.features).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 500,
        ..TrainConfig::default()
    };
    let mut m = model(&cfg, &data);
    train(&mut m, &set, &cfg, |_| {}).unwrap();
    assert_eq!(m.store.step, 500);
    let loss = m.loss(&set).unwrap();
    assert!(loss < 0.01, "loss {loss}");
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let (_dir, data) = bundle(Task::Mixed, 64, 0);
    let set = samples(&data.train, &data.features).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut m = model(&cfg, &data);
    let before: Vec<_> = m.store.entries().iter().map(|e| e.value.clone()).collect();
    let stats = train(&mut m, &set, &cfg, |_| {}).unwrap();
    let after: Vec<_> = m.store.entries().iter().map(|e| e.value.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(stats.len(), 2);
    assert!(stats
        .iter()
        .all(|s| s.mean_loss.is_finite() && s.mean_loss > 0.0));
}

#[test]
fn identical_runs_agree_bitwise() {
    let (_dir, data) = bundle(Task::Mixed, 80, 0);
    let set = samples(&data.train, &data.features).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        variant: Variant::CvaV,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = model(&cfg, &data);
        let stats = train(&mut m, &set, &cfg, |_| {}).unwrap();
        (
            m.store,
            stats
                .iter()
                .map(|s| s.mean_loss.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_mid_epoch_matches_an_uninterrupted_run() {
    let (dir, data) = bundle(Task::Spatial, 70, 0);
    let set = samples(&data.train, &data.features).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };

    let mut whole = model(&cfg, &data);
    train(&mut whole, &set, &cfg, |_| {}).unwrap();

    let mut first = model(&cfg, &data);
    while first.store.step < 7 {
        train_steps(&mut first, &set, &cfg, 7).unwrap();
    }
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&first.store, &path).unwrap();
    drop(first);

    let mut resumed = model(
        &TrainConfig {
            seed: 99,
            ..cfg.clone()
        },
        &data,
    );
    resumed.load_store(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.store.step, 7);
    train(&mut resumed, &set, &cfg, |_| {}).unwrap();
    assert_eq!(resumed.store, whole.store);
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let (dir, data) = bundle(Task::Spatial, 8, 0);
    let small = model(&TrainConfig::default(), &data);
    let path = dir.path().join("small.ckpt");
    save_checkpoint(&small.store, &path).unwrap();
    let wider = TrainConfig {
        hidden: Some(24),
        ..TrainConfig::default()
    };
    let mut other = model(&wider, &data);
    match other.load_store(load_checkpoint(&path).unwrap()) {
        Err(Error::ParamShape { name, .. }) => assert!(name.starts_with("encoder."), "{name}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn untrained_model_is_at_chance_on_the_spatial_task() {
    let (_dir, data) = bundle(Task::Spatial, 200, 500);
    let m = model(&TrainConfig::default(), &data);
    let report = evaluate(&m, &data.test, &data.features, &data.answers, None).unwrap();
    assert_eq!(report.count, 500);
    assert!(
        (report.accuracy - 0.2).abs() <= 0.05,
        "accuracy {}",
        report.accuracy
    );
    let again = evaluate(&m, &data.test, &data.features, &data.answers, None).unwrap();
    assert_eq!(report, again);
}
