use memmcl_core::tasks::{default_registry, find_task, generate_task_suite, SplitSizes};
use memmcl_core::toymodel::{
    batch_loss, batch_loss_and_gradient, effective_weights, encode_samples, forward, init_base, train_expert,
    AdapterState, Classifier, DenseModel, LoraAdapter, TrainConfig,
};
use memmcl_core::{rng, TaskMeta};
use rand::Rng;

fn setup(
    task_id: &str,
    n_train: usize,
) -> (
    Classifier,
    memmcl_core::TensorMap,
    TaskMeta,
    Vec<memmcl_core::LabeledExample>,
) {
    let reg = default_registry();
    let task = find_task(&reg, task_id).unwrap().clone();
    let data = generate_task_suite(
        std::slice::from_ref(&task),
        |_| SplitSizes {
            train: n_train,
            test: 20,
        },
        11,
    )
    .unwrap();
    let clf = Classifier::for_registry(&reg).unwrap();
    let base = init_base(clf.arch(), 11).unwrap();
    (clf, base, task, data.into_iter().next().unwrap().train)
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn gradient_matches_central_differences() {
    let (clf, base, task, train) = setup("ABSA-ASD", 5);
    let dense = DenseModel::with_arch(clf.arch(), &base).unwrap();
    let samples = encode_samples(&clf, &train, &task).unwrap();
    let adapter = LoraAdapter::new(clf.arch(), 4, 16.0, 0.0, 3).unwrap();
    let mut state = AdapterState::from_adapter(&adapter, clf.arch()).unwrap();
    let mut rng = rng::stream(3, "gradcheck-b", 0);
    for b in [&mut state.b1, &mut state.b2] {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
    }

    let (_, analytic) = batch_loss_and_gradient(&dense, &state, &samples);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.params().into_iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let mut plus = state.clone();
            plus.params_mut()[pi][j] += h;
            let mut minus = state.clone();
            minus.params_mut()[pi][j] -= h;
            let numeric = (batch_loss(&dense, &plus, &samples) - batch_loss(&dense, &minus, &samples)) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn zero_b_adapter_is_the_base() {
    let (clf, base, task, train) = setup("SC-3class", 20);
    let adapter = LoraAdapter::new(clf.arch(), 4, 16.0, 0.05, 9).unwrap();
    assert_eq!(adapter.scale(), 4.0);
    let adapted = effective_weights(&base, &adapter).unwrap();
    assert!(adapted.bitwise_eq(&base));
    for ex in &train {
        let x: Vec<f32> = clf.encode(ex, &task).unwrap().iter().map(|&v| v as f32).collect();
        assert_eq!(forward(&adapted, &x).unwrap(), forward(&base, &x).unwrap());
    }
}

#[test]
fn training_lowers_loss_and_leaves_base_untouched() {
    let (clf, base, task, train) = setup("SC-2class-sen", 240);
    let snapshot = base.clone();
    let out = train_expert(&clf, &base, &train, &task, &desk_config(5)).unwrap();
    assert!(base.bitwise_eq(&snapshot));
    let first = out.history.first().unwrap().mean_loss;
    let last = out.history.last().unwrap().mean_loss;
    assert!(last < first, "loss {first} -> {last}");
    let acc = out.history.last().unwrap().train_accuracy;
    assert!(acc > 1.0 / task.classes as f64, "train accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let (clf, base, task, train) = setup("MAST-Irony", 80);
    let a = train_expert(&clf, &base, &train, &task, &desk_config(2)).unwrap();
    let b = train_expert(&clf, &base, &train, &task, &desk_config(2)).unwrap();
    assert_eq!(a.adapter, b.adapter);
    assert_eq!(a.history, b.history);
    let c = train_expert(&clf, &base, &train, &task, &desk_config(3)).unwrap();
    assert_ne!(a.adapter, c.adapter);
}

#[test]
fn default_schedule_runs_at_most_ten_epochs() {
    let (clf, base, task, train) = setup("SC-2class-doc", 64);
    let cfg = TrainConfig {
        early_stop_patience: 100,
        ..TrainConfig::default()
    };
    let out = train_expert(&clf, &base, &train, &task, &cfg).unwrap();
    assert_eq!(out.history.len(), 10);
    assert_eq!(
        out.history.iter().map(|h| h.epoch).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
}

#[test]
fn divergence_is_reported() {
    let (clf, base, task, train) = setup("SC-2class-sen", 64);
    let cfg = TrainConfig {
        learning_rate: 1e6,
        weight_decay: 0.0,
        lora_dropout: 0.0,
        max_epochs: 200,
        early_stop_patience: 200,
        ..TrainConfig::default()
    };
    match train_expert(&clf, &base, &train, &task, &cfg) {
        Err(memmcl_core::toymodel::ModelError::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn adapter_survives_checkpoint_round_trip() {
    let (clf, base, task, train) = setup("ABSA-ATSA", 40);
    let out = train_expert(&clf, &base, &train, &task, &desk_config(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.emcp");
    memmcl_core::save_checkpoint(&out.adapter.to_tensor_map(), &path).unwrap();
    let back = LoraAdapter::from_tensor_map(&memmcl_core::load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.factors, out.adapter.factors);
    assert!(effective_weights(&base, &back)
        .unwrap()
        .bitwise_eq(&effective_weights(&base, &out.adapter).unwrap()));
}
