//! Metadata-driven task difficulty, curriculum ordering and exemplar prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{EvalReport, MetricError};
use crate::rng;
use crate::tasks::{build_prompt, default_registry, LabeledExample, TaskError, TaskMeta};
use crate::toymodel::{Classifier, CompiledModel, ModelError};
use crate::TensorMap;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("the published ranking only applies to the default 15-task registry")]
    NotDefaultRegistry,
    #[error("task {task} has {available} examples, {needed} required")]
    InsufficientExamples {
        task: String,
        available: usize,
        needed: usize,
    },
    #[error("exemplars per task must be at least 1")]
    ZeroExemplars,
    #[error("no data for task {0}")]
    MissingData(String),
    #[error("unknown ranking policy {0:?}")]
    UnknownPolicy(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Weights of the linear difficulty score over class count, diversity,
/// complexity and subjectivity. Defaults are 1.0, 0.5, 2.0, 5.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.5,
            w3: 2.0,
            w4: 5.0,
        }
    }
}

/// `w1·C + w2·V + w3·Z + w4·S`.
pub fn difficulty_score(meta: &TaskMeta, w: &DifficultyWeights) -> f64 {
    w.w1 * meta.classes as f64
        + w.w2 * meta.diversity as f64
        + w.w3 * meta.complexity as f64
        + w.w4 * meta.subjective as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingPolicy {
    /// Stable ascending sort on score; ties keep registry order.
    #[default]
    ScoreAscending,
    /// The published rank column for the default registry.
    Published,
}

impl RankingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            RankingPolicy::ScoreAscending => "score_ascending",
            RankingPolicy::Published => "published",
        }
    }
}

impl fmt::Display for RankingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RankingPolicy {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "score_ascending" => Ok(RankingPolicy::ScoreAscending),
            "published" => Ok(RankingPolicy::Published),
            other => Err(CurriculumError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Published rank of each default-registry task. It is not a pure score sort:
/// ABSA-ATSA (4.5) sits behind SC-3class (5.5), and ABSA-TSD (6.5) behind
/// SC-5class (8).
pub const PUBLISHED_RANKS: [(&str, usize); 15] = [
    ("SC-2class-sen", 1),
    ("SC-2class-doc", 2),
    ("SC-3class", 3),
    ("SC-5class", 6),
    ("ABSA-ATSA", 4),
    ("ABSA-ACSA", 5),
    ("ABSA-TSD", 7),
    ("ABSA-ASD", 8),
    ("ABSA-ASTE", 12),
    ("ABSA-ASQP", 13),
    ("MAST-11class", 14),
    ("MAST-28class", 15),
    ("MAST-Hate", 9),
    ("MAST-Offensive", 10),
    ("MAST-Irony", 11),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub task: TaskMeta,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Tasks in curriculum order, easiest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    pub entries: Vec<PlanEntry>,
    pub policy: RankingPolicy,
}

impl CurriculumPlan {
    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.task.task_id.as_str())
    }

    /// `task_id,C,V,Z,S,score,rank,policy` rows in plan order.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "task_id,C,V,Z,S,score,rank,policy")?;
        for e in &self.entries {
            let t = &e.task;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t.task_id, t.classes, t.diversity, t.complexity, t.subjective, e.score, e.rank, self.policy
            )?;
        }
        w.flush()
    }
}

pub fn rank_tasks(
    registry: &[TaskMeta],
    w: &DifficultyWeights,
    policy: RankingPolicy,
) -> Result<CurriculumPlan, CurriculumError> {
    if registry.is_empty() {
        return Err(CurriculumError::EmptyRegistry);
    }
    let scored: Vec<(usize, f64)> = registry
        .iter()
        .enumerate()
        .map(|(i, t)| (i, difficulty_score(t, w)))
        .collect();
    let order: Vec<(usize, f64, usize)> = match policy {
        RankingPolicy::ScoreAscending => {
            let mut sorted = scored;
            // stable: equal scores keep registry order
            sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
            sorted
                .into_iter()
                .enumerate()
                .map(|(pos, (i, s))| (i, s, pos + 1))
                .collect()
        }
        RankingPolicy::Published => {
            if registry != default_registry().as_slice() {
                return Err(CurriculumError::NotDefaultRegistry);
            }
            let mut ranked: Vec<(usize, f64, usize)> = scored
                .into_iter()
                .map(|(i, s)| {
                    let rank = PUBLISHED_RANKS
                        .iter()
                        .find(|(id, _)| *id == registry[i].task_id)
                        .map(|(_, r)| *r)
                        .expect("default registry covers every published rank");
                    (i, s, rank)
                })
                .collect();
            ranked.sort_by_key(|&(_, _, r)| r);
            ranked
        }
    };
    Ok(CurriculumPlan {
        entries: order
            .into_iter()
            .map(|(i, score, rank)| PlanEntry {
                task: registry[i].clone(),
                score,
                rank,
            })
            .collect(),
        policy,
    })
}

/// `### Instruction / [### Aspect] / ### Input / ### Response` with the gold
/// output filled in.
pub fn render_exemplar(example: &LabeledExample) -> Result<String, TaskError> {
    let mut s = build_prompt(
        &example.instruction,
        &example.input_text,
        example.aspect.as_deref(),
        None,
    )?;
    s.push_str(&example.gold);
    s.push('\n');
    Ok(s)
}

/// Separator line between exemplar blocks.
pub const EXEMPLAR_SEPARATOR: &str = "\n---\n";

/// Picks `k` training examples per task (the first `k` of a seeded shuffle)
/// and renders them in plan order.
pub fn assemble_exemplars(
    plan: &CurriculumPlan,
    datasets: &BTreeMap<String, Vec<LabeledExample>>,
    k: usize,
    seed: u64,
) -> Result<String, CurriculumError> {
    if k == 0 {
        return Err(CurriculumError::ZeroExemplars);
    }
    let mut blocks = Vec::with_capacity(plan.entries.len() * k);
    for entry in &plan.entries {
        let id = &entry.task.task_id;
        let data = datasets
            .get(id)
            .ok_or_else(|| CurriculumError::MissingData(id.clone()))?;
        if data.len() < k {
            return Err(CurriculumError::InsufficientExamples {
                task: id.clone(),
                available: data.len(),
                needed: k,
            });
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &format!("exemplars:{id}"), 0));
        for &i in &idx[..k] {
            blocks.push(render_exemplar(&data[i])?);
        }
    }
    Ok(blocks.join(EXEMPLAR_SEPARATOR))
}

/// Query prompt preceded by the exemplar block.
pub fn curriculum_prompt(task: &TaskMeta, example: &LabeledExample, exemplars: &str) -> Result<String, TaskError> {
    let instruction = if example.instruction.is_empty() {
        &task.instruction
    } else {
        &example.instruction
    };
    build_prompt(
        instruction,
        &example.input_text,
        example.aspect.as_deref(),
        (!exemplars.is_empty()).then_some(exemplars),
    )
}

/// Text-in/text-out inference.
pub trait InferenceAdapter: Sync {
    fn respond(&self, prompt: &str) -> Result<String, String>;
}

impl<F> InferenceAdapter for F
where
    F: Fn(&str) -> Result<String, String> + Sync,
{
    fn respond(&self, prompt: &str) -> Result<String, String> {
        self(prompt)
    }
}

/// Fields of the final query section of a prompt. Exemplars before it are
/// ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuery {
    pub instruction: String,
    pub aspect: Option<String>,
    pub input: String,
}

pub fn parse_query(prompt: &str) -> Option<ParsedQuery> {
    let start = prompt.rfind("### Instruction:\n")?;
    let rest = &prompt[start + "### Instruction:\n".len()..];
    let rest = rest.strip_suffix("### Response:\n")?;
    let (head, input) = rest.split_once("### Input:\n")?;
    let input = input.strip_suffix('\n')?.to_string();
    let (instruction, aspect) = match head.split_once("### Aspect:\n") {
        Some((i, a)) => (i, Some(a.strip_suffix('\n')?.to_string())),
        None => (head, None),
    };
    Some(ParsedQuery {
        instruction: instruction.strip_suffix('\n')?.to_string(),
        aspect,
        input,
    })
}

/// Serves a parameter set through the text interface. The task is identified
/// by its instruction; any exemplar block is ignored.
pub struct ToyModelAdapter<'a> {
    model: CompiledModel<'a>,
    registry: Vec<TaskMeta>,
}

impl<'a> ToyModelAdapter<'a> {
    pub fn new(classifier: &'a Classifier, params: &TensorMap, registry: &[TaskMeta]) -> Result<Self, ModelError> {
        Ok(Self {
            model: classifier.compile(params)?,
            registry: registry.to_vec(),
        })
    }
}

impl InferenceAdapter for ToyModelAdapter<'_> {
    fn respond(&self, prompt: &str) -> Result<String, String> {
        let q = parse_query(prompt).ok_or("prompt has no query section")?;
        let task = self
            .registry
            .iter()
            .find(|t| t.instruction == q.instruction)
            .ok_or_else(|| format!("no task with instruction {:?}", q.instruction))?;
        let example = LabeledExample {
            task_id: task.task_id.clone(),
            instruction: q.instruction,
            input_text: q.input,
            aspect: q.aspect,
            gold: String::new(),
        };
        self.model.predict(&example, task).map_err(|e| e.to_string())
    }
}

/// Outcome for one task: a report, or the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvaluation {
    pub task_id: String,
    pub result: Result<EvalReport, String>,
}

/// Scores every task's test split, in plan order, with the task's own metric.
/// Each query is prompted with `exemplars` in front. A failing adapter call
/// marks that task as failed and the run moves on.
pub fn run_curriculum_eval(
    plan: &CurriculumPlan,
    test_sets: &BTreeMap<String, Vec<LabeledExample>>,
    exemplars: &str,
    adapter: &dyn InferenceAdapter,
) -> Vec<TaskEvaluation> {
    plan.entries
        .iter()
        .map(|entry| {
            let task = &entry.task;
            let result = (|| {
                let data = test_sets
                    .get(&task.task_id)
                    .ok_or_else(|| format!("no test data for {}", task.task_id))?;
                let mut preds = Vec::with_capacity(data.len());
                for ex in data {
                    let prompt = curriculum_prompt(task, ex, exemplars).map_err(|e| e.to_string())?;
                    let response = adapter.respond(&prompt)?;
                    preds.push(response.trim().to_string());
                }
                let golds: Vec<String> = data.iter().map(|e| e.gold.clone()).collect();
                EvalReport::evaluate(&task.task_id, task.metric, &preds, &golds, &task.label_set)
                    .map_err(|e: MetricError| e.to_string())
            })();
            TaskEvaluation {
                task_id: task.task_id.clone(),
                result,
            }
        })
        .collect()
}
