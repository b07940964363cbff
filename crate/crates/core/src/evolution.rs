//! Genetic search over merge weights.
//!
//! An [`Individual`] is a weight vector on the simplex. Its fitness is the mean,
//! over tasks with nonempty weak data, of the per-task mean similarity between
//! the merged model's predictions and the gold labels. Each generation keeps
//! the `elitism_count` best individuals and refills the population with
//! `mutate(crossover(tournament, tournament))` offspring.
//!
//! All randomness for a generation is drawn serially from named streams before
//! fitness evaluation fans out, so results do not depend on thread scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TensorMap;
use crate::merge::{flatten_weights, merge_weighted, project_simplex, MergeError, WeightVector};
use crate::metrics::{ExactMatch, SimilarityKernel};
use crate::rng::{self, Stream};
use crate::tasks::{LabeledExample, TaskGroup, TaskMeta};
use crate::toymodel::{Classifier, ModelError};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("every weak set is empty; substitute the fallback slice of training data before merging")]
    AllWeakSetsEmpty,
    #[error("individual {0} has no fitness")]
    MissingFitness(usize),
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("need at least {needed} models, got {got}")]
    TooFewModels { needed: usize, got: usize },
    #[error("missing task group {0}")]
    MissingGroup(TaskGroup),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// GA settings. Defaults: 10 generations, population 20, per-gene mutation
/// probability 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub generations: usize,
    pub population_size: usize,
    pub mutation_prob: f64,
    pub mutation_sigma: f64,
    pub elitism_count: usize,
    pub tournament_size: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            generations: 10,
            population_size: 20,
            mutation_prob: 0.1,
            mutation_sigma: 0.1,
            elitism_count: 2,
            tournament_size: 3,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: String| Err(EvolutionError::Config(m));
        if self.population_size < 4 {
            return bad(format!(
                "population_size must be at least 4, got {}",
                self.population_size
            ));
        }
        if self.elitism_count >= self.population_size {
            return bad("elitism_count must be below population_size".into());
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return bad(format!(
                "tournament_size must be in 1..={}, got {}",
                self.population_size, self.tournament_size
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad(format!("mutation_prob must be in [0, 1], got {}", self.mutation_prob));
        }
        if !(self.mutation_sigma >= 0.0 && self.mutation_sigma.is_finite()) {
            return bad(format!(
                "mutation_sigma must be non-negative, got {}",
                self.mutation_sigma
            ));
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub weights: WeightVector,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(weights: WeightVector) -> Self {
        Self { weights, fitness: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_weights: WeightVector,
}

/// `population_size` vectors drawn uniform in `[0,1]^dim`, then projected.
pub fn init_population(dim: usize, cfg: &EvolutionConfig, rng: &mut Stream) -> Result<Vec<Individual>, EvolutionError> {
    if dim == 0 {
        return Err(EvolutionError::TooFewModels { needed: 1, got: 0 });
    }
    (0..cfg.population_size)
        .map(|_| {
            let raw: Vec<f32> = (0..dim).map(|_| rng.random::<f32>()).collect();
            Ok(Individual::new(project_simplex(&raw)?))
        })
        .collect()
}

/// One-point crossover at a given cut: `a[..cut] ++ b[cut..]`, projected.
pub fn crossover_at(a: &Individual, b: &Individual, cut: usize) -> Result<Individual, EvolutionError> {
    let (wa, wb) = (a.weights.values(), b.weights.values());
    if wa.len() != wb.len() {
        return Err(MergeError::LengthMismatch {
            models: wa.len(),
            weights: wb.len(),
        }
        .into());
    }
    let raw: Vec<f32> = wa[..cut].iter().chain(&wb[cut..]).copied().collect();
    Ok(Individual::new(project_simplex(&raw)?))
}

/// One-point crossover with the cut drawn uniformly from `1..dim`. With fewer
/// than two genes there is no cut point and the child is a copy of `a`.
pub fn crossover(a: &Individual, b: &Individual, rng: &mut Stream) -> Result<Individual, EvolutionError> {
    let dim = a.weights.len();
    if dim < 2 {
        return Ok(Individual::new(a.weights.clone()));
    }
    let cut = rng.random_range(1..dim);
    crossover_at(a, b, cut)
}

/// Adds `N(0, sigma²)` to each gene with probability `mutation_prob`. No
/// projection.
pub fn perturb(raw: &[f32], cfg: &EvolutionConfig, rng: &mut Stream) -> Vec<f32> {
    let noise = (cfg.mutation_sigma > 0.0).then(|| Normal::new(0.0, cfg.mutation_sigma).expect("validated sigma"));
    raw.iter()
        .map(|&v| {
            let hit = rng.random::<f64>() < cfg.mutation_prob;
            match (&noise, hit) {
                (Some(n), true) => (v as f64 + n.sample(rng)) as f32,
                _ => v,
            }
        })
        .collect()
}

pub fn mutate(ind: &Individual, cfg: &EvolutionConfig, rng: &mut Stream) -> Result<Individual, EvolutionError> {
    Ok(Individual::new(project_simplex(&perturb(
        ind.weights.values(),
        cfg,
        rng,
    ))?))
}

fn fitness_of(pop: &[Individual], i: usize) -> Result<f64, EvolutionError> {
    pop[i].fitness.ok_or(EvolutionError::MissingFitness(i))
}

fn tournament(pop: &[Individual], size: usize, rng: &mut Stream) -> Result<usize, EvolutionError> {
    let mut entrants = sample(rng, pop.len(), size.min(pop.len())).into_vec();
    entrants.sort_unstable();
    let mut best = entrants[0];
    let mut best_fit = fitness_of(pop, best)?;
    for &i in &entrants[1..] {
        let f = fitness_of(pop, i)?;
        if f > best_fit {
            best = i;
            best_fit = f;
        }
    }
    Ok(best)
}

/// Two independent tournaments, each sampled without replacement; the fittest
/// entrant wins, ties to the lower population index.
pub fn select_parents<'p>(
    population: &'p [Individual],
    cfg: &EvolutionConfig,
    rng: &mut Stream,
) -> Result<(&'p Individual, &'p Individual), EvolutionError> {
    if let Some(i) = population.iter().position(|p| p.fitness.is_none()) {
        return Err(EvolutionError::MissingFitness(i));
    }
    let a = tournament(population, cfg.tournament_size, rng)?;
    let b = tournament(population, cfg.tournament_size, rng)?;
    Ok((&population[a], &population[b]))
}

/// Items the merged model is scored on for one task.
#[derive(Debug, Clone)]
pub struct FitnessTarget {
    pub task: TaskMeta,
    pub items: Vec<LabeledExample>,
}

/// A set of models to merge and the weak data that scores each merge.
#[derive(Clone)]
pub struct MergeProblem<'a> {
    pub classifier: &'a Classifier,
    pub models: Vec<TensorMap>,
    pub targets: Vec<FitnessTarget>,
    pub kernel: Arc<dyn SimilarityKernel>,
}

impl<'a> MergeProblem<'a> {
    pub fn new(classifier: &'a Classifier, models: Vec<TensorMap>, targets: Vec<FitnessTarget>) -> Self {
        Self {
            classifier,
            models,
            targets,
            kernel: Arc::new(ExactMatch),
        }
    }

    pub fn with_kernel(mut self, kernel: Arc<dyn SimilarityKernel>) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn merge(&self, w: &WeightVector) -> Result<TensorMap, EvolutionError> {
        Ok(merge_weighted(&self.models, w)?)
    }

    /// Merges with `w` and scores the result on the weak data.
    pub fn evaluate(&self, w: &WeightVector) -> Result<f64, EvolutionError> {
        self.score_model(&self.merge(w)?)
    }

    /// Unweighted mean over nonempty targets of the mean kernel value.
    pub fn score_model(&self, params: &TensorMap) -> Result<f64, EvolutionError> {
        let compiled = self.classifier.compile(params)?;
        let mut total = 0.0;
        let mut counted = 0usize;
        for target in self.targets.iter().filter(|t| !t.items.is_empty()) {
            let mut sum = 0.0;
            for ex in &target.items {
                let pred = compiled.predict(ex, &target.task)?;
                sum += self.kernel.similarity(&pred, &ex.gold);
            }
            total += sum / target.items.len() as f64;
            counted += 1;
        }
        if counted == 0 {
            return Err(EvolutionError::AllWeakSetsEmpty);
        }
        Ok(total / counted as f64)
    }
}

/// Fitness of merge weights `w` over `problem`'s weak data.
pub fn evaluate_fitness(w: &WeightVector, problem: &MergeProblem<'_>) -> Result<f64, EvolutionError> {
    problem.evaluate(w)
}

fn evaluate_pending(pop: &mut [Individual], problem: &MergeProblem<'_>) -> Result<(), EvolutionError> {
    pop.par_iter_mut()
        .filter(|ind| ind.fitness.is_none())
        .try_for_each(|ind| {
            ind.fitness = Some(problem.evaluate(&ind.weights)?);
            Ok(())
        })
}

/// Population indices sorted by fitness, best first; ties keep index order.
fn ranked(pop: &[Individual]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.sort_by(|&a, &b| {
        let (fa, fb) = (
            pop[a].fitness.unwrap_or(f64::NEG_INFINITY),
            pop[b].fitness.unwrap_or(f64::NEG_INFINITY),
        );
        fb.total_cmp(&fa)
    });
    idx
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub best: Individual,
    pub merged: TensorMap,
    pub history: Vec<GenerationRecord>,
}

/// Runs the GA for `cfg.generations` generations.
pub fn evolve(problem: &MergeProblem<'_>, cfg: &EvolutionConfig) -> Result<EvolutionResult, EvolutionError> {
    evolve_observed(problem, cfg, |_, _| {})
}

/// [`evolve`], calling `observe(generation, population)` once per generation
/// after evaluation.
pub fn evolve_observed(
    problem: &MergeProblem<'_>,
    cfg: &EvolutionConfig,
    mut observe: impl FnMut(usize, &[Individual]),
) -> Result<EvolutionResult, EvolutionError> {
    cfg.validate()?;
    let dim = problem.models.len();
    if dim < 2 {
        return Err(EvolutionError::TooFewModels { needed: 2, got: dim });
    }
    let mut pop = init_population(dim, cfg, &mut rng::stream(cfg.seed, "init-population", 0))?;
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        evaluate_pending(&mut pop, problem)?;
        observe(generation, &pop);
        let order = ranked(&pop);
        let best = &pop[order[0]];
        let mean = pop.iter().map(|p| p.fitness.unwrap_or(0.0)).sum::<f64>() / pop.len() as f64;
        history.push(GenerationRecord {
            generation,
            best_fitness: best.fitness.unwrap_or(0.0),
            mean_fitness: mean,
            best_weights: best.weights.clone(),
        });
        if generation + 1 == cfg.generations {
            let best = best.clone();
            let merged = problem.merge(&best.weights)?;
            return Ok(EvolutionResult { best, merged, history });
        }

        let mut rng = rng::stream(cfg.seed, "breed", generation as u64);
        let mut next: Vec<Individual> = order[..cfg.elitism_count].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < cfg.population_size {
            let (a, b) = select_parents(&pop, cfg, &mut rng)?;
            let child = crossover(a, b, &mut rng)?;
            next.push(mutate(&child, cfg, &mut rng)?);
        }
        pop = next;
    }
    unreachable!("generations >= 1 is validated")
}

/// One task's expert and weak data, as input to the two-stage search.
#[derive(Debug, Clone)]
pub struct ExpertEntry {
    pub task: TaskMeta,
    pub model: TensorMap,
    pub weak: Vec<LabeledExample>,
}

impl ExpertEntry {
    fn target(&self) -> FitnessTarget {
        FitnessTarget {
            task: self.task.clone(),
            items: self.weak.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// `"stage1"` or `"stage2"`.
    pub stage: &'static str,
    /// Group name, or `"final"` for stage 2.
    pub group: String,
    pub record: GenerationRecord,
}

#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub group: TaskGroup,
    pub task_ids: Vec<String>,
    pub best: Individual,
    pub merged: TensorMap,
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub final_model: TensorMap,
    pub groups: Vec<GroupOutcome>,
    pub final_weights: Individual,
    pub history: Vec<StageRecord>,
}

impl TwoStageResult {
    /// Per-expert weights `w_g · w_t`, ordered group by group.
    pub fn flattened_weights(&self) -> Result<WeightVector, MergeError> {
        let inner: Vec<WeightVector> = self.groups.iter().map(|g| g.best.weights.clone()).collect();
        flatten_weights(&self.final_weights.weights, &inner)
    }
}

/// Stage 1 merges each group's experts against that group's weak data. Stage 2
/// merges the three group models against the union of all weak data. A group
/// with a single expert skips the search and takes weight 1.
pub fn evolve_two_stage(
    classifier: &Classifier,
    experts_by_group: &BTreeMap<TaskGroup, Vec<ExpertEntry>>,
    cfg: &EvolutionConfig,
    kernel: Arc<dyn SimilarityKernel>,
) -> Result<TwoStageResult, EvolutionError> {
    cfg.validate()?;
    let mut history = Vec::new();
    let mut groups = Vec::with_capacity(TaskGroup::ALL.len());
    for group in TaskGroup::ALL {
        let experts = experts_by_group
            .get(&group)
            .filter(|e| !e.is_empty())
            .ok_or(EvolutionError::MissingGroup(group))?;
        let problem = MergeProblem {
            classifier,
            models: experts.iter().map(|e| e.model.clone()).collect(),
            targets: experts.iter().map(ExpertEntry::target).collect(),
            kernel: kernel.clone(),
        };
        let task_ids = experts.iter().map(|e| e.task.task_id.clone()).collect();
        if experts.len() == 1 {
            let weights = WeightVector::one_hot(1, 0)?;
            let fitness = match problem.evaluate(&weights) {
                Ok(f) => Some(f),
                Err(EvolutionError::AllWeakSetsEmpty) => None,
                Err(e) => return Err(e),
            };
            groups.push(GroupOutcome {
                group,
                task_ids,
                best: Individual { weights, fitness },
                merged: experts[0].model.clone(),
            });
            continue;
        }
        let stage_cfg = EvolutionConfig {
            seed: rng::derive_seed(cfg.seed, &format!("stage1:{group}"), 0),
            ..cfg.clone()
        };
        let result = evolve(&problem, &stage_cfg)?;
        history.extend(result.history.into_iter().map(|record| StageRecord {
            stage: "stage1",
            group: group.to_string(),
            record,
        }));
        groups.push(GroupOutcome {
            group,
            task_ids,
            best: result.best,
            merged: result.merged,
        });
    }

    let problem = MergeProblem {
        classifier,
        models: groups.iter().map(|g| g.merged.clone()).collect(),
        targets: TaskGroup::ALL
            .iter()
            .flat_map(|g| experts_by_group[g].iter().map(ExpertEntry::target))
            .collect(),
        kernel,
    };
    let stage_cfg = EvolutionConfig {
        seed: rng::derive_seed(cfg.seed, "stage2", 0),
        ..cfg.clone()
    };
    let result = evolve(&problem, &stage_cfg)?;
    history.extend(result.history.into_iter().map(|record| StageRecord {
        stage: "stage2",
        group: "final".to_string(),
        record,
    }));
    Ok(TwoStageResult {
        final_model: result.merged,
        groups,
        final_weights: result.best,
        history,
    })
}

/// Writes `stage,group,generation,best_fitness,mean_fitness,best_weights`
/// rows, weights joined by `;`.
pub fn write_history_csv<W: Write>(out: W, history: &[StageRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "stage,group,generation,best_fitness,mean_fitness,best_weights")?;
    for h in history {
        let weights: Vec<String> = h.record.best_weights.values().iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            h.stage,
            h.group,
            h.record.generation,
            h.record.best_fitness,
            h.record.mean_fitness,
            weights.join(";")
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ind(v: &[f32]) -> Individual {
        Individual::new(WeightVector::new(v.to_vec()).unwrap())
    }

    fn scored(v: &[f32], f: f64) -> Individual {
        Individual {
            fitness: Some(f),
            ..ind(v)
        }
    }

    fn close(a: &WeightVector, b: &[f32]) -> bool {
        a.values().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        for bad in [
            EvolutionConfig {
                population_size: 3,
                ..Default::default()
            },
            EvolutionConfig {
                elitism_count: 20,
                ..Default::default()
            },
            EvolutionConfig {
                mutation_prob: 1.5,
                ..Default::default()
            },
            EvolutionConfig {
                tournament_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn population_shape() {
        let cfg = EvolutionConfig::default();
        let pop = init_population(5, &cfg, &mut rng::stream(1, "p", 0)).unwrap();
        assert_eq!(pop.len(), 20);
        assert!(pop
            .iter()
            .all(|p| (p.weights.sum() - 1.0).abs() < 1e-6 && p.fitness.is_none()));
        let again = init_population(5, &cfg, &mut rng::stream(1, "p", 0)).unwrap();
        assert_eq!(pop, again);
    }

    #[test]
    fn crossover_cases() {
        let a = ind(&[0.4, 0.4, 0.1, 0.1]);
        let b = ind(&[0.1, 0.1, 0.4, 0.4]);
        let child = crossover_at(&a, &b, 2).unwrap();
        assert!(close(&child.weights, &[0.25; 4]));
        let mut rng = rng::stream(0, "x", 0);
        let same = crossover(&a, &a, &mut rng).unwrap();
        assert!(close(&same.weights, a.weights.values()));
        let single = scored(&[1.0], 0.5);
        let copy = crossover(&single, &ind(&[1.0]), &mut rng).unwrap();
        assert_eq!(copy.weights, single.weights);
        assert_eq!(copy.fitness, None);
    }

    #[test]
    fn crossover_cut_is_interior() {
        let a = ind(&[1.0, 0.0, 0.0]);
        let b = ind(&[0.0, 0.0, 1.0]);
        let mut rng = rng::stream(3, "x", 0);
        for _ in 0..200 {
            // k = 0 would copy b, k = 3 would copy a; neither may happen
            let c = crossover(&a, &b, &mut rng).unwrap();
            assert!(close(&c.weights, &[0.5, 0.0, 0.5]));
        }
    }

    #[test]
    fn mutation_no_ops() {
        let x = ind(&[0.2, 0.3, 0.5]);
        let mut rng = rng::stream(0, "m", 0);
        let cfg = EvolutionConfig {
            mutation_prob: 0.0,
            mutation_sigma: 0.5,
            ..Default::default()
        };
        assert!(close(&mutate(&x, &cfg, &mut rng).unwrap().weights, x.weights.values()));
        let cfg = EvolutionConfig {
            mutation_prob: 1.0,
            mutation_sigma: 0.0,
            ..Default::default()
        };
        assert!(close(&mutate(&x, &cfg, &mut rng).unwrap().weights, x.weights.values()));
    }

    #[test]
    fn mutation_displacement_is_half_normal() {
        // E|N(0, s²)| = s·sqrt(2/π)
        let cfg = EvolutionConfig {
            mutation_prob: 1.0,
            mutation_sigma: 0.1,
            ..Default::default()
        };
        let raw = [0.2f32; 5];
        let mut rng = rng::stream(17, "m", 0);
        let mut total = 0.0;
        for _ in 0..1000 {
            let p = perturb(&raw, &cfg, &mut rng);
            total += p.iter().zip(&raw).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        }
        let mean = total / 5000.0;
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() <= 0.1 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn tournament_rules() {
        let pop: Vec<Individual> = (0..6).map(|i| scored(&[1.0], i as f64 / 10.0)).collect();
        let cfg = EvolutionConfig {
            population_size: 6,
            tournament_size: 6,
            ..Default::default()
        };
        let mut rng = rng::stream(0, "s", 0);
        for _ in 0..10 {
            let (a, b) = select_parents(&pop, &cfg, &mut rng).unwrap();
            assert_eq!((a.fitness, b.fitness), (Some(0.5), Some(0.5)));
        }

        let tied: Vec<Individual> = (0..4).map(|i| scored(&[1.0], if i == 0 { 0.0 } else { 0.7 })).collect();
        let cfg = EvolutionConfig {
            population_size: 4,
            tournament_size: 4,
            ..Default::default()
        };
        let (a, _) = select_parents(&tied, &cfg, &mut rng).unwrap();
        assert!(std::ptr::eq(a, &tied[1]));

        let mut missing = pop.clone();
        missing[2].fitness = None;
        assert!(matches!(
            select_parents(&missing, &cfg, &mut rng),
            Err(EvolutionError::MissingFitness(2))
        ));
    }

    #[test]
    fn dominant_individual_wins_its_tournaments() {
        let mut pop: Vec<Individual> = (0..10).map(|_| scored(&[1.0], 0.1)).collect();
        pop[7].fitness = Some(0.9);
        let cfg = EvolutionConfig {
            population_size: 10,
            tournament_size: 3,
            ..Default::default()
        };
        let mut rng = rng::stream(5, "s", 0);
        let mut wins = 0;
        for _ in 0..300 {
            let (a, _) = select_parents(&pop, &cfg, &mut rng).unwrap();
            if std::ptr::eq(a, &pop[7]) {
                wins += 1;
            }
        }
        // P(7 in a 3-of-10 tournament) = 0.3
        assert!((60..=120).contains(&wins), "{wins}");
    }

    #[test]
    fn history_csv_format() {
        let rec = StageRecord {
            stage: "stage1",
            group: "SC".into(),
            record: GenerationRecord {
                generation: 0,
                best_fitness: 0.5,
                mean_fitness: 0.25,
                best_weights: WeightVector::new(vec![0.5, 0.5]).unwrap(),
            },
        };
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stage,group,generation,best_fitness,mean_fitness,best_weights\nstage1,SC,0,0.5,0.25,0.5;0.5\n"
        );
    }
}
