//! The pipeline stages. Each command reads the previous stages' outputs from
//! the workspace and overwrites its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memmcl_core::curriculum::{assemble_exemplars, rank_tasks, CurriculumPlan, ToyModelAdapter};
use memmcl_core::evolution::{
    evolve_two_stage, write_history_csv, EvolutionConfig, ExpertEntry, FitnessTarget, MergeProblem, TwoStageResult,
};
use memmcl_core::merge::MergeRecipe;
use memmcl_core::metrics::ExactMatch;
use memmcl_core::tasks::{
    default_registry, extract_weak_data, generate_task_suite, read_jsonl, read_registry, write_jsonl, write_registry,
};
use memmcl_core::toymodel::{self, effective_weights, init_base, train_expert, Classifier, EpochStats};
use memmcl_core::{load_checkpoint, rng, save_checkpoint, LabeledExample, TaskGroup, TaskMeta, TensorMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::layout::{self, require, Workspace};

/// Resolved configuration plus workspace.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub workspace: Workspace,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Self {
        let workspace = Workspace::new(&config.pipeline.workspace);
        Self { config, workspace }
    }

    fn seed(&self) -> u64 {
        self.config.pipeline.seed
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive_seed(self.seed(), "tasks", 0)
    }

    pub fn base_seed(&self) -> u64 {
        rng::derive_seed(self.seed(), "base", 0)
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            seed: rng::derive_seed(self.seed(), "evolve", 0),
            ..self.config.merge.clone()
        }
    }

    fn registry(&self) -> Result<Vec<TaskMeta>, CliError> {
        Ok(read_registry(require(&self.workspace.registry())?)?)
    }

    fn split(&self, path: PathBuf) -> Result<Vec<LabeledExample>, CliError> {
        Ok(read_jsonl(require(&path)?)?)
    }

    fn load(&self, path: &Path) -> Result<TensorMap, CliError> {
        Ok(load_checkpoint(require(path)?)?)
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let to_err = |e: csv::Error| CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>, CliError> {
    let to_err = |e: csv::Error| CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    csv::Reader::from_path(require(path)?)
        .map_err(to_err)?
        .deserialize()
        .collect::<Result<Vec<D>, _>>()
        .map_err(to_err)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn remove_if_present(path: &Path) -> Result<(), CliError> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::io(path, e)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub task_id: String,
    pub train: usize,
    pub test: usize,
    pub train_flips: usize,
    pub test_flips: usize,
}

/// Writes the registry and every task's train/test split.
pub fn gen_tasks(ctx: &Context) -> Result<Vec<GenSummary>, CliError> {
    ctx.workspace.ensure(layout::DATASETS)?;
    let registry = default_registry();
    let suite = generate_task_suite(&registry, |t| ctx.config.split_sizes(t), ctx.data_seed())?;
    write_registry(&ctx.workspace.registry(), &registry)?;
    let mut summary = Vec::with_capacity(suite.len());
    for data in suite {
        write_jsonl(&ctx.workspace.train_split(&data.task_id), &data.train)?;
        write_jsonl(&ctx.workspace.test_split(&data.task_id), &data.test)?;
        summary.push(GenSummary {
            task_id: data.task_id,
            train: data.train.len(),
            test: data.test.len(),
            train_flips: data.train_flips,
            test_flips: data.test_flips,
        });
    }
    write_csv(
        &ctx.workspace.root().join(layout::DATASETS).join("summary.csv"),
        &summary,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task_id: String,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub chance: f64,
}

/// Trains one adapter per task on the shared frozen base and saves the
/// adapter, the materialized expert and the loss curve. Tasks that train
/// successfully are written even when another task fails.
pub fn train_experts(ctx: &Context) -> Result<Vec<TrainSummary>, CliError> {
    let registry = ctx.registry()?;
    let classifier = Classifier::for_registry(&registry)?;
    ctx.workspace.ensure(layout::EXPERTS)?;
    let base = init_base(classifier.arch(), ctx.base_seed())?;
    save_checkpoint(&base, ctx.workspace.base_model())?;

    let splits = registry
        .iter()
        .map(|t| ctx.split(ctx.workspace.train_split(&t.task_id)))
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes: Vec<Result<(toymodel::LoraAdapter, Vec<EpochStats>), CliError>> = registry
        .par_iter()
        .zip(&splits)
        .map(|(task, train)| {
            let cfg = toymodel::TrainConfig {
                seed: rng::expert_seed(ctx.seed(), &task.task_id),
                ..ctx.config.sft.clone()
            };
            train_expert(&classifier, &base, train, task, &cfg)
                .map(|o| (o.adapter, o.history))
                .map_err(|e| CliError::for_task(&task.task_id, e))
        })
        .collect();

    let mut summary = Vec::new();
    let mut first_error = None;
    for (task, outcome) in registry.iter().zip(outcomes) {
        let (adapter, history) = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("error: {e}");
                first_error.get_or_insert(e);
                continue;
            }
        };
        let id = &task.task_id;
        save_checkpoint(&adapter.to_tensor_map(), ctx.workspace.adapter(id))?;
        save_checkpoint(&effective_weights(&base, &adapter)?, ctx.workspace.expert(id))?;
        let path = ctx.workspace.loss_history(id);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        toymodel::write_history_csv(file, &history).map_err(|e| CliError::io(&path, e))?;
        let (first, last) = (&history[0], &history[history.len() - 1]);
        summary.push(TrainSummary {
            task_id: id.clone(),
            epochs: history.len(),
            first_loss: first.mean_loss,
            final_loss: last.mean_loss,
            train_accuracy: last.train_accuracy,
            chance: 1.0 / task.label_set.len() as f64,
        });
    }
    write_csv(&ctx.workspace.training_summary(), &summary)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSummary {
    pub task_id: String,
    pub train_size: usize,
    pub weak_size: usize,
    pub correct: usize,
    /// Items in the fallback slice; 0 when the weak set is nonempty.
    pub fallback: usize,
}

/// The last `n` training items, used as weak data when an expert makes no
/// training errors.
pub fn fallback_slice(train: &[LabeledExample], n: usize) -> &[LabeledExample] {
    &train[train.len().saturating_sub(n)..]
}

/// Writes each expert's misclassified training items, plus a fallback slice
/// for experts with none.
pub fn extract_weak(ctx: &Context) -> Result<Vec<WeakSummary>, CliError> {
    let registry = ctx.registry()?;
    let classifier = Classifier::for_registry(&registry)?;
    ctx.workspace.ensure(layout::WEAK)?;
    let mut summary = Vec::with_capacity(registry.len());
    for task in &registry {
        let id = &task.task_id;
        let expert = ctx.load(&ctx.workspace.expert(id))?;
        let train = ctx.split(ctx.workspace.train_split(id))?;
        let weak = extract_weak_data(&classifier, &expert, task, &train).map_err(|e| CliError::for_task(id, e))?;
        write_jsonl(&ctx.workspace.weak_set(id), &weak.items)?;
        let fallback_path = ctx.workspace.weak_fallback(id);
        let fallback = if weak.is_empty() {
            let slice = fallback_slice(&train, ctx.config.pipeline.weak_fallback_size);
            eprintln!(
                "warning: {id}: expert makes no training errors; using the last {} training items as weak data",
                slice.len()
            );
            write_jsonl(&fallback_path, slice)?;
            slice.len()
        } else {
            remove_if_present(&fallback_path)?;
            0
        };
        summary.push(WeakSummary {
            task_id: id.clone(),
            train_size: train.len(),
            weak_size: weak.len(),
            correct: train.len() - weak.len(),
            fallback,
        });
    }
    write_csv(&ctx.workspace.weak_summary(), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRow {
    pub model: String,
    pub fitness: f64,
}

/// Loads every expert with its weak data (or fallback slice), keyed by group.
pub fn load_experts(ctx: &Context, registry: &[TaskMeta]) -> Result<BTreeMap<TaskGroup, Vec<ExpertEntry>>, CliError> {
    let mut by_group: BTreeMap<TaskGroup, Vec<ExpertEntry>> = BTreeMap::new();
    for task in registry {
        let id = &task.task_id;
        let model = ctx.load(&ctx.workspace.expert(id))?;
        let mut weak = ctx.split(ctx.workspace.weak_set(id))?;
        if weak.is_empty() {
            weak = ctx.split(ctx.workspace.weak_fallback(id))?;
        }
        by_group.entry(task.group).or_default().push(ExpertEntry {
            task: task.clone(),
            model,
            weak,
        });
    }
    Ok(by_group)
}

/// Runs the two-stage search and writes the group and final models, the
/// search history, merge recipes and a fitness table comparing the final
/// model with the base and every single expert on the union of weak data.
pub fn evolve(ctx: &Context) -> Result<TwoStageResult, CliError> {
    let registry = ctx.registry()?;
    let classifier = Classifier::for_registry(&registry)?;
    let by_group = load_experts(ctx, &registry)?;
    let result = evolve_two_stage(&classifier, &by_group, &ctx.evolution_config(), Arc::new(ExactMatch))?;

    let ws = &ctx.workspace;
    ws.ensure(layout::MERGED)?;
    for g in &result.groups {
        save_checkpoint(&g.merged, ws.group_model(g.group))?;
        let paths = g.task_ids.iter().map(|t| Workspace::expert_rel(t)).collect();
        MergeRecipe::new(g.group.as_str(), paths, &g.best.weights)?.save(&ws.recipe(g.group.as_str()))?;
    }
    save_checkpoint(&result.final_model, ws.final_model())?;
    let group_paths = result
        .groups
        .iter()
        .map(|g| Workspace::group_model_rel(g.group))
        .collect();
    MergeRecipe::new("final", group_paths, &result.final_weights.weights)?.save(&ws.recipe("final"))?;
    let expert_paths = result
        .groups
        .iter()
        .flat_map(|g| g.task_ids.iter().map(|t| Workspace::expert_rel(t)))
        .collect();
    MergeRecipe::new("flattened", expert_paths, &result.flattened_weights()?)?.save(&ws.recipe("flattened"))?;

    let path = ws.merge_history();
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_history_csv(file, &result.history).map_err(|e| CliError::io(&path, e))?;

    let experts: Vec<&ExpertEntry> = TaskGroup::ALL.iter().flat_map(|g| &by_group[g]).collect();
    let problem = MergeProblem::new(
        &classifier,
        Vec::new(),
        experts
            .iter()
            .map(|e| FitnessTarget {
                task: e.task.clone(),
                items: e.weak.clone(),
            })
            .collect(),
    );
    let mut rows = vec![
        FitnessRow {
            model: "final".into(),
            fitness: problem.score_model(&result.final_model)?,
        },
        FitnessRow {
            model: "base".into(),
            fitness: problem.score_model(&ctx.load(&ws.base_model())?)?,
        },
    ];
    for e in &experts {
        rows.push(FitnessRow {
            model: e.task.task_id.clone(),
            fitness: problem.score_model(&e.model)?,
        });
    }
    write_csv(&ws.fitness(), &rows)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub metric: String,
    pub n: usize,
    pub base: f64,
    pub expert: f64,
    pub merged: f64,
}

fn load_splits(
    ctx: &Context,
    registry: &[TaskMeta],
    path: impl Fn(&str) -> PathBuf,
) -> Result<BTreeMap<String, Vec<LabeledExample>>, CliError> {
    registry
        .iter()
        .map(|t| Ok((t.task_id.clone(), ctx.split(path(&t.task_id))?)))
        .collect()
}

/// Scores `params` on every task of `plan` through the text interface.
fn score_plan(
    classifier: &Classifier,
    params: &TensorMap,
    registry: &[TaskMeta],
    plan: &CurriculumPlan,
    tests: &BTreeMap<String, Vec<LabeledExample>>,
    exemplars: &str,
) -> Result<Vec<memmcl_core::metrics::EvalReport>, CliError> {
    let adapter = ToyModelAdapter::new(classifier, params, registry)?;
    memmcl_core::curriculum::run_curriculum_eval(plan, tests, exemplars, &adapter)
        .into_iter()
        .map(|e| {
            e.result.map_err(|message| CliError::Inference {
                task: e.task_id,
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CurriculumOutput {
    pub plan: CurriculumPlan,
    pub exemplars: String,
    pub rows: Vec<EvalRow>,
}

/// Ranks the tasks, assembles the exemplar block and evaluates the base
/// model, each task's expert and the final merged model on every test split,
/// in plan order, with the exemplar block in every prompt.
pub fn curriculum(ctx: &Context) -> Result<CurriculumOutput, CliError> {
    let registry = ctx.registry()?;
    let classifier = Classifier::for_registry(&registry)?;
    let ws = &ctx.workspace;
    let plan = rank_tasks(&registry, &ctx.config.difficulty, ctx.config.pipeline.ranking_policy)?;
    let train = load_splits(ctx, &registry, |t| ws.train_split(t))?;
    let tests = load_splits(ctx, &registry, |t| ws.test_split(t))?;
    let exemplars = assemble_exemplars(
        &plan,
        &train,
        ctx.config.pipeline.exemplars_per_task,
        rng::derive_seed(ctx.seed(), "exemplars", 0),
    )?;

    let base = ctx.load(&ws.base_model())?;
    let merged = ctx.load(&ws.final_model())?;
    let base_reports = score_plan(&classifier, &base, &registry, &plan, &tests, &exemplars)?;
    let merged_reports = score_plan(&classifier, &merged, &registry, &plan, &tests, &exemplars)?;
    let expert_reports = plan
        .entries
        .par_iter()
        .map(|entry| {
            let single = CurriculumPlan {
                entries: vec![entry.clone()],
                policy: plan.policy,
            };
            let expert = ctx.load(&ws.expert(&entry.task.task_id))?;
            Ok(score_plan(&classifier, &expert, &registry, &single, &tests, &exemplars)?.remove(0))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let rows: Vec<EvalRow> = base_reports
        .iter()
        .zip(&expert_reports)
        .zip(&merged_reports)
        .map(|((b, e), m)| EvalRow {
            task_id: b.task_id.clone(),
            metric: b.metric.to_string(),
            n: b.n,
            base: b.value,
            expert: e.value,
            merged: m.value,
        })
        .collect();

    ws.ensure(layout::CURRICULUM)?;
    ws.ensure(layout::REPORTS)?;
    let path = ws.plan();
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    plan.write_csv(file).map_err(|e| CliError::io(&path, e))?;
    write_text(&ws.exemplars(), &exemplars)?;
    write_csv(&ws.evaluation(), &rows)?;
    Ok(CurriculumOutput { plan, exemplars, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task_id: String,
    pub metric: String,
    pub base: f64,
    pub expert: f64,
    pub merged: f64,
    pub merged_minus_base: f64,
    pub merged_minus_expert: f64,
    pub merged_ge_base: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ComparisonRow>,
    pub merged_ge_base: usize,
    pub merged_ge_expert: usize,
    /// Final-model and best single-expert fitness on the union weak set, when
    /// the merge stage's fitness table is present.
    pub fitness: Option<(f64, String, f64)>,
}

pub fn compare(rows: &[EvalRow]) -> Vec<ComparisonRow> {
    rows.iter()
        .map(|r| ComparisonRow {
            task_id: r.task_id.clone(),
            metric: r.metric.clone(),
            base: r.base,
            expert: r.expert,
            merged: r.merged,
            merged_minus_base: r.merged - r.base,
            merged_minus_expert: r.merged - r.expert,
            merged_ge_base: r.merged >= r.base,
        })
        .collect()
}

/// Reads the evaluation table and writes per-task deltas and a summary.
pub fn report(ctx: &Context) -> Result<Report, CliError> {
    let ws = &ctx.workspace;
    let eval: Vec<EvalRow> = read_csv(&ws.evaluation())?;
    let rows = compare(&eval);
    let merged_ge_base = rows.iter().filter(|r| r.merged_ge_base).count();
    let merged_ge_expert = rows.iter().filter(|r| r.merged_minus_expert >= 0.0).count();
    let fitness = if ws.fitness().exists() {
        let table: Vec<FitnessRow> = read_csv(&ws.fitness())?;
        let final_fitness = table.iter().find(|r| r.model == "final").map(|r| r.fitness);
        let best = table
            .iter()
            .filter(|r| r.model != "final" && r.model != "base")
            .max_by(|a, b| a.fitness.total_cmp(&b.fitness));
        final_fitness.zip(best).map(|(f, b)| (f, b.model.clone(), b.fitness))
    } else {
        None
    };

    let n = rows.len();
    let mean = |f: fn(&ComparisonRow) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mut text = String::new();
    text.push_str(&format!("tasks: {n}\n"));
    text.push_str(&format!("merged >= base: {merged_ge_base}/{n}\n"));
    text.push_str(&format!("merged >= expert: {merged_ge_expert}/{n}\n"));
    text.push_str(&format!("mean base: {:.4}\n", mean(|r| r.base)));
    text.push_str(&format!("mean expert: {:.4}\n", mean(|r| r.expert)));
    text.push_str(&format!("mean merged: {:.4}\n", mean(|r| r.merged)));
    text.push_str(&format!("mean merged - base: {:+.4}\n", mean(|r| r.merged_minus_base)));
    if let Some((f, best, bf)) = &fitness {
        text.push_str(&format!(
            "union weak-set fitness: final {f:.4}, best single expert {best} {bf:.4}\n"
        ));
    }
    ws.ensure(layout::REPORTS)?;
    write_csv(&ws.comparison(), &rows)?;
    write_text(&ws.summary(), &text)?;
    Ok(Report {
        rows,
        merged_ge_base,
        merged_ge_expert,
        fitness,
    })
}

/// Every stage in order.
pub fn run_all(ctx: &Context) -> Result<Report, CliError> {
    gen_tasks(ctx)?;
    train_experts(ctx)?;
    extract_weak(ctx)?;
    evolve(ctx)?;
    curriculum(ctx)?;
    report(ctx)
}
