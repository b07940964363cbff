//! The 15 sentiment tasks, their metadata, a seeded synthetic suite that
//! mirrors that metadata, the instruction prompt format, and weak-data
//! extraction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::metrics::Metric;
use crate::rng;
use crate::toymodel::{Classifier, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskGroup {
    SC,
    ABSA,
    MAST,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 3] = [TaskGroup::SC, TaskGroup::ABSA, TaskGroup::MAST];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskGroup::SC => "SC",
            TaskGroup::ABSA => "ABSA",
            TaskGroup::MAST => "MAST",
        }
    }
}

impl fmt::Display for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SC" => Ok(TaskGroup::SC),
            "ABSA" => Ok(TaskGroup::ABSA),
            "MAST" => Ok(TaskGroup::MAST),
            other => Err(format!("unknown task group {other:?}")),
        }
    }
}

/// One task's identity and the meta-factors that feed its difficulty score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: String,
    pub group: TaskGroup,
    /// Number of sentiment classes.
    #[serde(rename = "C")]
    pub classes: u32,
    /// Dataset diversity.
    #[serde(rename = "V")]
    pub diversity: u32,
    /// Task complexity.
    #[serde(rename = "Z")]
    pub complexity: u32,
    /// Subjectivity flag, 0 or 1.
    #[serde(rename = "S")]
    pub subjective: u32,
    pub metric: Metric,
    pub label_set: Vec<String>,
    pub instruction: String,
}

impl TaskMeta {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn has_aspect(&self) -> bool {
        self.group == TaskGroup::ABSA
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("task {task}: C = {classes} but label_set has {labels} labels")]
    ClassCount { task: String, classes: u32, labels: usize },
    #[error("task {task}: S must be 0 or 1, got {value}")]
    Subjectivity { task: String, value: u32 },
    #[error("task {task}: label_set is empty")]
    NoLabels { task: String },
    #[error("duplicate task id {0:?}")]
    DuplicateTask(String),
    #[error("task {task}: {split} size {size} cannot cover {classes} classes")]
    TooSmall {
        task: String,
        split: &'static str,
        size: usize,
        classes: usize,
    },
    #[error("instruction must be nonempty")]
    EmptyInstruction,
    #[error("input text must be nonempty")]
    EmptyInput,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

pub fn validate_registry(registry: &[TaskMeta]) -> Result<(), TaskError> {
    let mut ids = std::collections::HashSet::new();
    for t in registry {
        if !ids.insert(t.task_id.as_str()) {
            return Err(TaskError::DuplicateTask(t.task_id.clone()));
        }
        if t.label_set.is_empty() {
            return Err(TaskError::NoLabels {
                task: t.task_id.clone(),
            });
        }
        if t.classes > 0 && t.classes as usize != t.label_set.len() {
            return Err(TaskError::ClassCount {
                task: t.task_id.clone(),
                classes: t.classes,
                labels: t.label_set.len(),
            });
        }
        if t.subjective > 1 {
            return Err(TaskError::Subjectivity {
                task: t.task_id.clone(),
                value: t.subjective,
            });
        }
    }
    Ok(())
}

const BINARY: &[&str] = &["Negative", "Positive"];
const TERNARY: &[&str] = &["Negative", "Neutral", "Positive"];
const FIVE: &[&str] = &["Very Negative", "Negative", "Neutral", "Positive", "Very Positive"];
const EMOTIONS_11: &[&str] = &[
    "anger",
    "anticipation",
    "disgust",
    "fear",
    "joy",
    "love",
    "optimism",
    "pessimism",
    "sadness",
    "surprise",
    "trust",
];
const EMOTIONS_28: &[&str] = &[
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
    "neutral",
];

/// Aspect vocabulary for aspect-based tasks. With complexity `Z >= 2` the
/// first `Z` entries each own a cluster bank.
pub const ASPECTS: &[&str] = &["food", "service", "price", "ambience"];

#[allow(clippy::too_many_arguments)]
fn meta(
    task_id: &str,
    group: TaskGroup,
    (c, v, z, s): (u32, u32, u32, u32),
    metric: Metric,
    labels: &[&str],
    task_text: &str,
) -> TaskMeta {
    let instruction = format!("{task_text} Answer with one of: {}.", labels.join(", "));
    TaskMeta {
        task_id: task_id.to_string(),
        group,
        classes: c,
        diversity: v,
        complexity: z,
        subjective: s,
        metric,
        label_set: labels.iter().map(|l| l.to_string()).collect(),
        instruction,
    }
}

/// The 15 tasks with their class count, diversity, complexity and
/// subjectivity factors and evaluation metric.
pub fn default_registry() -> Vec<TaskMeta> {
    use Metric::*;
    use TaskGroup::*;
    vec![
        meta(
            "SC-2class-sen",
            SC,
            (2, 1, 1, 0),
            Accuracy,
            BINARY,
            "Classify the sentiment of the sentence.",
        ),
        meta(
            "SC-2class-doc",
            SC,
            (2, 2, 1, 0),
            Accuracy,
            BINARY,
            "Classify the sentiment of the document.",
        ),
        meta(
            "SC-3class",
            SC,
            (3, 1, 1, 0),
            Accuracy,
            TERNARY,
            "Classify the sentiment of the text.",
        ),
        meta(
            "SC-5class",
            SC,
            (5, 2, 1, 0),
            Accuracy,
            FIVE,
            "Rate the sentiment of the review.",
        ),
        meta(
            "ABSA-ATSA",
            ABSA,
            (2, 1, 1, 0),
            Accuracy,
            BINARY,
            "Classify the sentiment toward the aspect term.",
        ),
        meta(
            "ABSA-ACSA",
            ABSA,
            (3, 1, 1, 0),
            Accuracy,
            TERNARY,
            "Classify the sentiment toward the aspect category.",
        ),
        meta(
            "ABSA-TSD",
            ABSA,
            (2, 1, 2, 0),
            MicroF1,
            BINARY,
            "Detect the sentiment of the target.",
        ),
        meta(
            "ABSA-ASD",
            ABSA,
            (3, 1, 2, 0),
            MicroF1,
            TERNARY,
            "Detect the sentiment of the aspect.",
        ),
        meta(
            "ABSA-ASTE",
            ABSA,
            (3, 1, 3, 0),
            MicroF1,
            TERNARY,
            "Extract the aspect-opinion sentiment.",
        ),
        meta(
            "ABSA-ASQP",
            ABSA,
            (3, 1, 4, 0),
            MicroF1,
            TERNARY,
            "Predict the aspect sentiment quad polarity.",
        ),
        meta(
            "MAST-11class",
            MAST,
            (11, 1, 1, 1),
            Accuracy,
            EMOTIONS_11,
            "Identify the emotion expressed.",
        ),
        meta(
            "MAST-28class",
            MAST,
            (28, 1, 1, 1),
            Accuracy,
            EMOTIONS_28,
            "Identify the fine-grained emotion expressed.",
        ),
        meta(
            "MAST-Hate",
            MAST,
            (2, 1, 1, 1),
            MacroF1,
            &["non-hate", "hate"],
            "Decide whether the text is hateful.",
        ),
        meta(
            "MAST-Offensive",
            MAST,
            (2, 1, 1, 1),
            MacroF1,
            &["not-offensive", "offensive"],
            "Decide whether the text is offensive.",
        ),
        meta(
            "MAST-Irony",
            MAST,
            (2, 1, 1, 1),
            MacroF1,
            &["non-irony", "irony"],
            "Decide whether the text is ironic.",
        ),
    ]
}

/// Union of all label sets, in first-appearance order.
pub fn global_vocabulary(registry: &[TaskMeta]) -> Vec<String> {
    let mut vocab: Vec<String> = Vec::new();
    for t in registry {
        for l in &t.label_set {
            if !vocab.contains(l) {
                vocab.push(l.clone());
            }
        }
    }
    vocab
}

pub fn find_task<'a>(registry: &'a [TaskMeta], task_id: &str) -> Result<&'a TaskMeta, TaskError> {
    registry
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| TaskError::UnknownTask(task_id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub task_id: String,
    pub instruction: String,
    #[serde(rename = "input")]
    pub input_text: String,
    pub aspect: Option<String>,
    #[serde(rename = "output")]
    pub gold: String,
}

/// Training items an expert gets wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSet {
    pub task_id: String,
    pub items: Vec<LabeledExample>,
}

impl WeakSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Number of quantized feature tokens in every synthetic input.
pub const FEATURE_TOKENS: usize = 21;
/// Feature values are clamped to `[-FEATURE_RANGE, FEATURE_RANGE]` before quantization.
pub const FEATURE_RANGE: f64 = 4.0;
/// Tokens are integers in `0..=QUANT_LEVELS`.
pub const QUANT_LEVELS: u32 = 255;
/// Probability that a subjective task's example carries the features of its
/// most confusable class.
pub const SUBJECTIVE_FLIP_RATE: f64 = 0.1;
const CENTER_STD: f64 = 0.45;
/// Variance share of a class center drawn from a label-keyed stream common
/// to every task using that label.
const SHARED_CENTER_FRACTION: f64 = 0.5;
const NOISE_STD: f64 = 1.0;

pub fn quantize(x: f64) -> u32 {
    let clamped = x.clamp(-FEATURE_RANGE, FEATURE_RANGE);
    ((clamped + FEATURE_RANGE) / (2.0 * FEATURE_RANGE) * QUANT_LEVELS as f64).round() as u32
}

pub fn dequantize(q: u32) -> f64 {
    q as f64 / QUANT_LEVELS as f64 * (2.0 * FEATURE_RANGE) - FEATURE_RANGE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: String,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Subjectivity flips injected into the train split.
    pub train_flips: usize,
    pub test_flips: usize,
}

/// Cluster geometry of one synthetic task.
struct TaskGeometry {
    /// `centers[bank][class][cluster]`
    centers: Vec<Vec<Vec<Vec<f64>>>>,
    /// Most confusable class per bank and class.
    nearest: Vec<Vec<usize>>,
}

impl TaskGeometry {
    fn sample(task: &TaskMeta, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &format!("centers:{}", task.task_id), 0);
        let banks = task.complexity.max(1) as usize;
        let classes = task.label_set.len();
        let clusters = task.diversity.max(1) as usize;
        let normal = Normal::new(0.0, CENTER_STD).unwrap();
        let shared_w = SHARED_CENTER_FRACTION.sqrt();
        let own_w = (1.0 - SHARED_CENTER_FRACTION).sqrt();
        let centers: Vec<Vec<Vec<Vec<f64>>>> = (0..banks)
            .map(|b| {
                task.label_set
                    .iter()
                    .map(|label| {
                        (0..clusters)
                            .map(|k| {
                                let mut shared =
                                    rng::stream(seed, &format!("label-center:{label}"), (b * 16 + k) as u64);
                                (0..FEATURE_TOKENS)
                                    .map(|_| shared_w * normal.sample(&mut shared) + own_w * normal.sample(&mut rng))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let nearest = centers
            .iter()
            .map(|bank| {
                let means: Vec<Vec<f64>> = bank
                    .iter()
                    .map(|cl| {
                        (0..FEATURE_TOKENS)
                            .map(|d| cl.iter().map(|c| c[d]).sum::<f64>() / cl.len() as f64)
                            .collect()
                    })
                    .collect();
                (0..classes)
                    .map(|c| {
                        (0..classes)
                            .filter(|&o| o != c)
                            .min_by(|&a, &b| sq_dist(&means[c], &means[a]).total_cmp(&sq_dist(&means[c], &means[b])))
                            .unwrap_or(c)
                    })
                    .collect()
            })
            .collect();
        Self { centers, nearest }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn generate_split(
    task: &TaskMeta,
    geometry: &TaskGeometry,
    n: usize,
    seed: u64,
    split: &'static str,
) -> Result<(Vec<LabeledExample>, usize), TaskError> {
    let classes = task.label_set.len();
    if n < classes {
        return Err(TaskError::TooSmall {
            task: task.task_id.clone(),
            split,
            size: n,
            classes,
        });
    }
    let mut rng = rng::stream(seed, &format!("data:{}:{split}", task.task_id), 0);
    let banks = geometry.centers.len();
    let clusters = geometry.centers[0][0].len();
    let noise = Normal::new(0.0, NOISE_STD).unwrap();

    let mut golds: Vec<usize> = (0..n).map(|i| i % classes).collect();
    golds.shuffle(&mut rng);

    let mut flips = 0;
    let items = golds
        .into_iter()
        .map(|gold| {
            let (aspect, bank) = if task.has_aspect() {
                let choices = if banks >= 2 { banks } else { ASPECTS.len() };
                let a = rng.random_range(0..choices);
                (Some(ASPECTS[a].to_string()), if banks >= 2 { a } else { 0 })
            } else {
                (None, 0)
            };
            let mut feature_class = gold;
            if task.subjective == 1 && classes >= 2 && rng.random::<f64>() < SUBJECTIVE_FLIP_RATE {
                feature_class = geometry.nearest[bank][gold];
                flips += 1;
            }
            let mut x = [0.0f64; FEATURE_TOKENS];
            for (b, bank_centers) in geometry.centers.iter().enumerate() {
                let class = if b == bank {
                    feature_class
                } else {
                    rng.random_range(0..classes)
                };
                let center = &bank_centers[class][rng.random_range(0..clusters)];
                for (xi, ci) in x.iter_mut().zip(center) {
                    *xi += ci;
                }
            }
            for xi in x.iter_mut() {
                *xi += noise.sample(&mut rng);
            }
            let input_text = x.iter().map(|&v| quantize(v).to_string()).collect::<Vec<_>>().join(" ");
            LabeledExample {
                task_id: task.task_id.clone(),
                instruction: task.instruction.clone(),
                input_text,
                aspect,
                gold: task.label_set[gold].clone(),
            }
        })
        .collect();
    Ok((items, flips))
}

/// Generates train and test splits for every task. Each task draws from its
/// own named streams, so the per-task parallel map equals a serial one.
pub fn generate_task_suite(
    registry: &[TaskMeta],
    sizes: impl Fn(&TaskMeta) -> SplitSizes + Sync,
    seed: u64,
) -> Result<Vec<TaskData>, TaskError> {
    validate_registry(registry)?;
    registry
        .par_iter()
        .map(|task| {
            let s = sizes(task);
            let geometry = TaskGeometry::sample(task, seed);
            let (train, train_flips) = generate_split(task, &geometry, s.train, seed, "train")?;
            let (test, test_flips) = generate_split(task, &geometry, s.test, seed, "test")?;
            Ok(TaskData {
                task_id: task.task_id.clone(),
                train,
                test,
                train_flips,
                test_flips,
            })
        })
        .collect()
}

/// Renders an instruction prompt, optionally preceded by an exemplar block.
pub fn build_prompt(
    instruction: &str,
    input_text: &str,
    aspect: Option<&str>,
    exemplar_block: Option<&str>,
) -> Result<String, TaskError> {
    if instruction.is_empty() {
        return Err(TaskError::EmptyInstruction);
    }
    if input_text.is_empty() {
        return Err(TaskError::EmptyInput);
    }
    let mut out = String::new();
    if let Some(block) = exemplar_block {
        out.push_str(block);
        out.push_str("\n\n");
    }
    out.push_str("### Instruction:\n");
    out.push_str(instruction);
    out.push('\n');
    if let Some(a) = aspect {
        out.push_str("### Aspect:\n");
        out.push_str(a);
        out.push('\n');
    }
    out.push_str("### Input:\n");
    out.push_str(input_text);
    out.push_str("\n### Response:\n");
    Ok(out)
}

/// Prompt for one example with no exemplar block.
pub fn example_prompt(example: &LabeledExample) -> Result<String, TaskError> {
    build_prompt(
        &example.instruction,
        &example.input_text,
        example.aspect.as_deref(),
        None,
    )
}

/// Runs the expert over its own training data and keeps the items it gets
/// wrong, in input order.
pub fn extract_weak_data(
    classifier: &Classifier,
    expert: &crate::TensorMap,
    task: &TaskMeta,
    train: &[LabeledExample],
) -> Result<WeakSet, ModelError> {
    let compiled = classifier.compile(expert)?;
    let mut items = Vec::new();
    for ex in train {
        if compiled.predict(ex, task)? != ex.gold {
            items.push(ex.clone());
        }
    }
    Ok(WeakSet {
        task_id: task.task_id.clone(),
        items,
    })
}

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataIoError + '_ {
    move |source| DataIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, items: &[LabeledExample]) -> Result<(), DataIoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| DataIoError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledExample>, DataIoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataIoError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_registry(path: &Path, registry: &[TaskMeta]) -> Result<(), DataIoError> {
    let mut bytes = serde_json::to_vec_pretty(registry).map_err(|source| DataIoError::Json {
        path: path.display().to_string(),
        line: 0,
        source,
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_registry(path: &Path) -> Result<Vec<TaskMeta>, DataIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| DataIoError::Json {
        path: path.display().to_string(),
        line: 0,
        source,
    })
}

/// Groups tasks by [`TaskGroup`], preserving registry order within a group.
pub fn tasks_by_group(registry: &[TaskMeta]) -> BTreeMap<TaskGroup, Vec<&TaskMeta>> {
    let mut out: BTreeMap<TaskGroup, Vec<&TaskMeta>> = BTreeMap::new();
    for t in registry {
        out.entry(t.group).or_default().push(t);
    }
    out
}
