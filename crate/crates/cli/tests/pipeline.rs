use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use memmcl_cli::commands::{self, EvalRow, FitnessRow};
use memmcl_cli::config::SizeOverride;
use memmcl_cli::{Context, PipelineConfig};
use memmcl_core::curriculum::{RankingPolicy, PUBLISHED_RANKS};
use memmcl_core::merge::MergeRecipe;
use memmcl_core::tasks::{read_jsonl, read_registry, write_jsonl};
use memmcl_core::toymodel::{Classifier, B2, W2};
use memmcl_core::{load_checkpoint, save_checkpoint, TaskGroup};
use sha2::{Digest, Sha256};

fn context(root: &Path, edit: impl FnOnce(&mut PipelineConfig)) -> Context {
    let mut cfg = PipelineConfig::default();
    cfg.pipeline.workspace = root.to_path_buf();
    edit(&mut cfg);
    Context::new(cfg)
}

fn small(cfg: &mut PipelineConfig) {
    cfg.pipeline.train_size = 60;
    cfg.pipeline.test_size = 40;
    cfg.merge.generations = 3;
}

fn digest(path: &Path) -> String {
    let bytes = fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), digest(&path));
            }
        }
    }
    out
}

fn read_csv<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn gen_tasks_creates_workspace_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("nested/ws");
    let ctx = context(&root, small);
    commands::gen_tasks(&ctx).unwrap();
    let names: Vec<String> = fs::read_dir(root.join("datasets"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".train.jsonl")).count(), 15);
    assert_eq!(names.iter().filter(|n| n.ends_with(".test.jsonl")).count(), 15);
    assert_eq!(read_registry(&ctx.workspace.registry()).unwrap().len(), 15);

    let before = tree(&root);
    commands::gen_tasks(&ctx).unwrap();
    assert_eq!(tree(&root), before);
}

#[test]
fn full_pipeline_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), |_| {});
    let ws = &ctx.workspace;
    commands::gen_tasks(&ctx).unwrap();
    let registry = read_registry(&ws.registry()).unwrap();
    let classifier = Classifier::for_registry(&registry).unwrap();

    // train-experts
    commands::train_experts(&ctx).unwrap();
    let base_hash = digest(&ws.base_model());
    for task in &registry {
        assert!(ws.adapter(&task.task_id).exists());
        let expert = load_checkpoint(ws.expert(&task.task_id)).unwrap();
        let train = read_jsonl(&ws.train_split(&task.task_id)).unwrap();
        let compiled = classifier.compile(&expert).unwrap();
        let correct = train
            .iter()
            .filter(|e| compiled.predict(e, task).unwrap() == e.gold)
            .count();
        let acc = correct as f64 / train.len() as f64;
        assert!(acc > 1.0 / task.classes as f64, "{} train accuracy {acc}", task.task_id);
    }
    commands::train_experts(&ctx).unwrap();
    assert_eq!(digest(&ws.base_model()), base_hash);

    // extract-weak
    let summary = commands::extract_weak(&ctx).unwrap();
    for (task, s) in registry.iter().zip(&summary) {
        let weak = read_jsonl(&ws.weak_set(&task.task_id)).unwrap();
        let params = load_checkpoint(ws.expert(&task.task_id)).unwrap();
        let expert = classifier.compile(&params).unwrap();
        assert!(
            weak.iter().all(|e| expert.predict(e, task).unwrap() != e.gold),
            "{}",
            task.task_id
        );
        assert_eq!(s.weak_size + s.correct, s.train_size);
        assert_eq!(s.weak_size, weak.len());
    }

    // evolve
    commands::evolve(&ctx).unwrap();
    for g in TaskGroup::ALL {
        assert!(ws.group_model(g).exists());
    }
    assert!(ws.final_model().exists());
    #[derive(serde::Deserialize)]
    struct Hist {
        stage: String,
        group: String,
        best_fitness: f64,
    }
    let hist: Vec<Hist> = read_csv(&ws.merge_history());
    let mut by_run: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for h in hist {
        by_run.entry((h.stage, h.group)).or_default().push(h.best_fitness);
    }
    assert_eq!(by_run.len(), 4);
    for (run, best) in &by_run {
        assert_eq!(best.len(), 10, "{run:?}");
        assert!(best.windows(2).all(|w| w[1] >= w[0]), "{run:?}");
    }
    for name in ["SC", "ABSA", "MAST", "final", "flattened"] {
        let recipe = MergeRecipe::load(&ws.recipe(name)).unwrap();
        let sum: f64 = recipe.models.iter().map(|m| m.weight as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{name} sums to {sum}");
    }
    let rebuilt = MergeRecipe::load(&ws.recipe("flattened"))
        .unwrap()
        .apply(ws.root())
        .unwrap();
    let stored = load_checkpoint(ws.final_model()).unwrap();
    for (a, b) in rebuilt.iter().zip(stored.iter()) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-5));
    }
    let fitness: Vec<FitnessRow> = read_csv(&ws.fitness());
    assert_eq!(fitness.len(), 17);
    assert!(fitness.iter().all(|r| (0.0..=1.0).contains(&r.fitness)));

    // curriculum
    commands::curriculum(&ctx).unwrap();
    let plan = fs::read_to_string(ws.plan()).unwrap();
    assert_eq!(plan.lines().count(), 16);
    assert!(plan.starts_with("task_id,C,V,Z,S,score,rank,policy\n"));
    let eval: Vec<EvalRow> = read_csv(&ws.evaluation());
    assert_eq!(eval.len(), 15);
    let plan_ids: Vec<&str> = plan.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(eval.iter().map(|r| r.task_id.as_str()).collect::<Vec<_>>(), plan_ids);
    assert!(fs::read_to_string(ws.exemplars())
        .unwrap()
        .starts_with("### Instruction:\n"));

    // report
    let report = commands::report(&ctx).unwrap();
    assert!(report.merged_ge_base <= 15);
    for (row, e) in report.rows.iter().zip(&eval) {
        assert!((row.merged_minus_base - (e.merged - e.base)).abs() < 1e-9);
        assert!((row.merged_minus_expert - (e.merged - e.expert)).abs() < 1e-9);
    }
    let comparison = digest(&ws.comparison());
    let summary_text = fs::read_to_string(ws.summary()).unwrap();
    assert!(summary_text.contains(&format!("merged >= base: {}/15", report.merged_ge_base)));
    commands::report(&ctx).unwrap();
    assert_eq!(digest(&ws.comparison()), comparison);

    // the whole pipeline again reproduces every file
    let before = tree(ws.root());
    commands::run_all(&ctx).unwrap();
    assert_eq!(tree(ws.root()), before);
}

#[test]
fn perfect_expert_triggers_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), small);
    let ws = &ctx.workspace;
    commands::gen_tasks(&ctx).unwrap();
    commands::train_experts(&ctx).unwrap();

    // one label everywhere and an expert that always predicts it
    let id = "SC-2class-sen";
    let registry = read_registry(&ws.registry()).unwrap();
    let task = registry.iter().find(|t| t.task_id == id).unwrap();
    let mut train = read_jsonl(&ws.train_split(id)).unwrap();
    for e in &mut train {
        e.gold = task.label_set[0].clone();
    }
    write_jsonl(&ws.train_split(id), &train).unwrap();
    let classifier = Classifier::for_registry(&registry).unwrap();
    let mut expert = load_checkpoint(ws.expert(id)).unwrap();
    expert.get_mut(W2).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    expert.get_mut(B2).unwrap().data[classifier.label_id(&task.label_set[0]).unwrap()] = 100.0;
    save_checkpoint(&expert, ws.expert(id)).unwrap();

    let summary = commands::extract_weak(&ctx).unwrap();
    let row = summary.iter().find(|s| s.task_id == id).unwrap();
    assert_eq!((row.weak_size, row.fallback), (0, 60));
    let fallback = read_jsonl(&ws.weak_fallback(id)).unwrap();
    assert_eq!(fallback, train[train.len() - 60..]);
    assert!(read_jsonl(&ws.weak_set(id)).unwrap().is_empty());

    let loaded = commands::load_experts(&ctx, &registry).unwrap();
    let entry = loaded[&TaskGroup::SC].iter().find(|e| e.task.task_id == id).unwrap();
    assert_eq!(entry.weak, fallback);
    commands::evolve(&ctx).unwrap();
}

#[test]
fn fallback_slice_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), |c| {
        small(c);
        c.pipeline
            .sizes
            .insert("SC-3class".into(), SizeOverride { train: 150, test: 30 });
    });
    commands::gen_tasks(&ctx).unwrap();
    let train = read_jsonl(&ctx.workspace.train_split("SC-3class")).unwrap();
    assert_eq!(train.len(), 150);
    assert_eq!(commands::fallback_slice(&train, 100), &train[50..]);
    assert_eq!(commands::fallback_slice(&train[..40], 100).len(), 40);
}

#[test]
fn published_policy_plan_matches_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), |c| {
        small(c);
        c.pipeline.ranking_policy = RankingPolicy::Published;
    });
    commands::run_all(&ctx).unwrap();
    let plan = fs::read_to_string(ctx.workspace.plan()).unwrap();
    let ranks: BTreeMap<&str, usize> = plan
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0], f[6].parse().unwrap())
        })
        .collect();
    let expected: BTreeMap<&str, usize> = PUBLISHED_RANKS.iter().copied().collect();
    assert_eq!(ranks, expected);
    assert!(plan
        .lines()
        .all(|l| l.ends_with("published") || l.starts_with("task_id")));
}

fn memmcl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_memmcl")).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(memmcl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(memmcl(&["--seed", "x", "report"]).status.code(), Some(1));
    assert_eq!(memmcl(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let ws_arg = ws.to_str().unwrap();
    let out = memmcl(&["--workspace", ws_arg, "evolve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("registry.json"));

    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "[sft]\nunknown_key = 1\n").unwrap();
    assert_eq!(
        memmcl(&["--config", bad_config.to_str().unwrap(), "gen-tasks"])
            .status
            .code(),
        Some(1)
    );

    let config = dir.path().join("diverge.toml");
    fs::write(
        &config,
        "[pipeline]\ntrain_size = 40\ntest_size = 30\n\
         [sft]\nlearning_rate = 1e6\nweight_decay = 0.0\nlora_dropout = 0.0\nmax_epochs = 200\nearly_stop_patience = 200\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    assert_eq!(
        memmcl(&["--config", cfg, "--workspace", ws_arg, "gen-tasks"])
            .status
            .code(),
        Some(0)
    );
    let out = memmcl(&["--config", cfg, "--workspace", ws_arg, "train-experts"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let config = dir.path().join("c.toml");
    fs::write(&config, "[pipeline]\nseed = 5\ntrain_size = 30\ntest_size = 30\n").unwrap();
    let cfg = config.to_str().unwrap();
    assert!(
        memmcl(&["--config", cfg, "--workspace", a.to_str().unwrap(), "gen-tasks"])
            .status
            .success()
    );
    assert!(memmcl(&[
        "--config",
        cfg,
        "--seed",
        "6",
        "--workspace",
        b.to_str().unwrap(),
        "gen-tasks"
    ])
    .status
    .success());
    assert_ne!(
        digest(&a.join("datasets/SC-3class.train.jsonl")),
        digest(&b.join("datasets/SC-3class.train.jsonl"))
    );
    let direct = context(&dir.path().join("c"), |c| {
        c.pipeline.seed = 5;
        c.pipeline.train_size = 30;
        c.pipeline.test_size = 30;
    });
    commands::gen_tasks(&direct).unwrap();
    assert_eq!(
        digest(&a.join("datasets/SC-3class.train.jsonl")),
        digest(&dir.path().join("c/datasets/SC-3class.train.jsonl"))
    );
}
