//! Regularized (aging) evolution with a pluggable fitness and
//! evaluator-predicted hardware constraints.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{
    base_accuracy, cost_report, CostError, CostReport, Dataset, DeviceProfile, OracleOptions, ACCURACY, LATENCY,
};
use crate::evaluator::{EvalError, Evaluator};
use crate::graphir::{tss_has_path, GraphError};
use crate::searchspace::{mutate, sample, ArchSpec, SpaceId};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("cannot parse constraint `{0}`: expected metric<=value|auto-mean|auto-median (or >=)")]
    ConstraintSyntax(String),
    #[error("constraint metric `{metric}` is not predicted by the evaluator (objectives: {available})")]
    UnknownMetric { metric: String, available: String },
    #[error("an evaluator is required for {0}")]
    MissingEvaluator(&'static str),
    #[error("threshold: {0}")]
    Threshold(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MaxAllowed,
    MinRequired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: String,
    pub threshold: f64,
    pub direction: Direction,
}

impl Constraint {
    pub fn max_allowed(metric: &str, threshold: f64) -> Self {
        Self {
            metric: metric.into(),
            threshold,
            direction: Direction::MaxAllowed,
        }
    }

    pub fn satisfied_by(&self, value: f64) -> bool {
        match self.direction {
            Direction::MaxAllowed => value <= self.threshold,
            Direction::MinRequired => value >= self.threshold,
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.direction {
            Direction::MaxAllowed => "<=",
            Direction::MinRequired => ">=",
        };
        write!(f, "{}{}{}", self.metric, op, self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSpec {
    Value(f64),
    Auto(Statistic),
}

/// Parsed `metric<=value|auto-mean|auto-median` (or `>=`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub metric: String,
    pub direction: Direction,
    pub threshold: ThresholdSpec,
}

impl FromStr for ConstraintSpec {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SearchError::ConstraintSyntax(s.to_string());
        let (metric, rest, direction) = if let Some((m, r)) = s.split_once("<=") {
            (m, r, Direction::MaxAllowed)
        } else if let Some((m, r)) = s.split_once(">=") {
            (m, r, Direction::MinRequired)
        } else {
            return Err(err());
        };
        let metric = metric.trim();
        let rest = rest.trim();
        if metric.is_empty() || !metric.chars().all(|c| c.is_ascii_alphanumeric() || "_@".contains(c)) {
            return Err(err());
        }
        let threshold = match rest {
            "auto-mean" => ThresholdSpec::Auto(Statistic::Mean),
            "auto-median" => ThresholdSpec::Auto(Statistic::Median),
            v => {
                let x: f64 = v.parse().map_err(|_| err())?;
                if !x.is_finite() && x != f64::INFINITY {
                    return Err(err());
                }
                ThresholdSpec::Value(x)
            }
        };
        Ok(Self {
            metric: metric.to_string(),
            direction,
            threshold,
        })
    }
}

impl ConstraintSpec {
    /// Fix the threshold, computing `auto-*` statistics from `dataset`.
    pub fn resolve(&self, dataset: Option<&Dataset>) -> Result<Constraint, SearchError> {
        let threshold = match self.threshold {
            ThresholdSpec::Value(v) => v,
            ThresholdSpec::Auto(stat) => {
                let ds = dataset.ok_or_else(|| SearchError::Threshold(format!("`{}` needs a dataset", self.metric)))?;
                threshold_from_dataset(ds, &self.metric, stat)?
            }
        };
        Ok(Constraint {
            metric: self.metric.clone(),
            threshold,
            direction: self.direction,
        })
    }
}

pub fn threshold_from_values(values: &[f64], stat: Statistic) -> Result<f64, SearchError> {
    if values.is_empty() {
        return Err(SearchError::Threshold("no values".into()));
    }
    Ok(match stat {
        Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Statistic::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        }
    })
}

pub fn threshold_from_dataset(dataset: &Dataset, metric: &str, stat: Statistic) -> Result<f64, SearchError> {
    let key = dataset
        .resolve_metric(metric)
        .map_err(|e| SearchError::Threshold(e.to_string()))?;
    let values = dataset.column(&key).map_err(|e| SearchError::Threshold(e.to_string()))?;
    threshold_from_values(&values, stat)
}

/// Map a metric name onto an evaluator output; bare `latency` matches the
/// evaluator's only latency objective.
pub fn objective_index(evaluator: &Evaluator, metric: &str) -> Result<usize, SearchError> {
    if let Some(i) = evaluator.objective_index(metric) {
        return Ok(i);
    }
    if metric == LATENCY {
        let hits: Vec<usize> = evaluator
            .objectives
            .iter()
            .enumerate()
            .filter(|(_, o)| o.starts_with("latency@"))
            .map(|(i, _)| i)
            .collect();
        if hits.len() == 1 {
            return Ok(hits[0]);
        }
    }
    Err(SearchError::UnknownMetric {
        metric: metric.to_string(),
        available: evaluator.objectives.join(", "),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub predicted: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn is_no_path(arch: &ArchSpec) -> bool {
    matches!(arch, ArchSpec::Tss(t) if !tss_has_path(t))
}

/// Predict every constrained metric and check them. Architectures without
/// an input-output path are infeasible.
pub fn constraint_filter(
    arch: &ArchSpec,
    evaluator: Option<&Evaluator>,
    constraints: &[Constraint],
) -> Result<Feasibility, SearchError> {
    if is_no_path(arch) {
        return Ok(Feasibility {
            feasible: false,
            predicted: BTreeMap::new(),
            reason: Some(GraphError::NoPath.to_string()),
        });
    }
    if constraints.is_empty() {
        return Ok(Feasibility {
            feasible: true,
            predicted: BTreeMap::new(),
            reason: None,
        });
    }
    let ev = evaluator.ok_or(SearchError::MissingEvaluator("constraints"))?;
    let pred = ev.predict(arch)?;
    let mut predicted = BTreeMap::new();
    let mut violated = Vec::new();
    for c in constraints {
        let v = pred[objective_index(ev, &c.metric)?];
        predicted.insert(c.metric.clone(), v);
        if !c.satisfied_by(v) {
            violated.push(format!("{c} (predicted {v})"));
        }
    }
    Ok(Feasibility {
        feasible: violated.is_empty(),
        predicted,
        reason: (!violated.is_empty()).then(|| format!("violates {}", violated.join("; "))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    /// Noise-free synthetic accuracy.
    #[default]
    SyntheticProxy,
    /// Accuracy predicted by an evaluator.
    EvaluatorAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population_size: usize,
    pub tournament_size: usize,
    pub cycles: usize,
    pub seed: u64,
    pub space: SpaceId,
    pub fitness: FitnessKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 25,
            tournament_size: 5,
            cycles: 1000,
            seed: 0,
            space: SpaceId::Tss,
            fitness: FitnessKind::SyntheticProxy,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.cycles == 0 {
            return bad("cycles must be positive");
        }
        if self.population_size == 0 || self.tournament_size == 0 {
            return bad("population and tournament sizes must be positive");
        }
        if self.tournament_size > self.population_size {
            return bad("tournament_size must not exceed population_size");
        }
        if self.cycles < self.population_size {
            return bad("cycles must be >= population_size");
        }
        Ok(())
    }
}

/// One evaluated candidate. The first `population_size` entries are the
/// random initial population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub cycle: usize,
    pub arch: String,
    pub arch_index: usize,
    pub fitness: Option<f64>,
    pub predicted: BTreeMap<String, f64>,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Log position of the parent, absent for the initial population.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    /// Best feasible fitness seen up to and including this entry.
    pub best_so_far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchLog {
    pub entries: Vec<LogEntry>,
    pub phase_seconds: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn feasible_count(&self) -> usize {
        self.entries.iter().filter(|e| e.feasible).count()
    }

    pub fn distinct_feasible(&self) -> usize {
        let mut seen: Vec<usize> = self.entries.iter().filter(|e| e.feasible).map(|e| e.arch_index).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Option<ArchSpec>,
    pub best_fitness: Option<f64>,
    pub log: SearchLog,
}

#[derive(Clone)]
struct Evaluated {
    fitness: Option<f64>,
    feas: Feasibility,
}

struct Member {
    log_pos: usize,
    arch: ArchSpec,
    fitness: Option<f64>,
    feasible: bool,
}

/// Evaluators consulted during a search.
#[derive(Clone, Copy, Default)]
pub struct Evaluators<'a> {
    /// Predicts constrained metrics.
    pub constraints: Option<&'a Evaluator>,
    /// Predicts accuracy for [`FitnessKind::EvaluatorAccuracy`].
    pub fitness: Option<&'a Evaluator>,
}

struct Timers {
    fitness: f64,
    constraints: f64,
}

fn fitness_of(
    arch: &ArchSpec,
    kind: FitnessKind,
    ev: Option<&Evaluator>,
    acc_index: Option<usize>,
) -> Result<Option<f64>, SearchError> {
    if is_no_path(arch) {
        return Ok(None);
    }
    Ok(Some(match kind {
        FitnessKind::SyntheticProxy => base_accuracy(arch),
        FitnessKind::EvaluatorAccuracy => {
            let ev = ev.ok_or(SearchError::MissingEvaluator("evaluator_accuracy fitness"))?;
            ev.predict(arch)?[acc_index.expect("checked")]
        }
    }))
}

/// `true` when `a` beats `b`: feasible first, then higher fitness.
fn better(a: &Member, b: &Member) -> bool {
    let key = |m: &Member| (m.feasible, m.fitness.unwrap_or(f64::NEG_INFINITY));
    let (fa, xa) = key(a);
    let (fb, xb) = key(b);
    fa && !fb || (fa == fb && xa > xb)
}

pub fn regularized_evolution(
    cfg: &SearchConfig,
    constraints: &[Constraint],
    evaluators: Evaluators<'_>,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let started = Instant::now();
    for c in constraints {
        let ev = evaluators.constraints.ok_or(SearchError::MissingEvaluator("constraints"))?;
        objective_index(ev, &c.metric)?;
        if c.threshold.is_nan() {
            return Err(SearchError::Config(format!("constraint {c} has NaN threshold")));
        }
    }
    let acc_index = match cfg.fitness {
        FitnessKind::SyntheticProxy => None,
        FitnessKind::EvaluatorAccuracy => {
            let ev = evaluators
                .fitness
                .ok_or(SearchError::MissingEvaluator("evaluator_accuracy fitness"))?;
            Some(objective_index(ev, ACCURACY)?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: HashMap<usize, Evaluated> = HashMap::new();
    let mut timers = Timers {
        fitness: 0.0,
        constraints: 0.0,
    };
    let mut evaluate = |arch: &ArchSpec, timers: &mut Timers| -> Result<Evaluated, SearchError> {
        if let Some(e) = cache.get(&arch.index()) {
            return Ok(e.clone());
        }
        let t = Instant::now();
        let fitness = fitness_of(arch, cfg.fitness, evaluators.fitness, acc_index)?;
        timers.fitness += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let feas = constraint_filter(arch, evaluators.constraints, constraints)?;
        timers.constraints += t.elapsed().as_secs_f64();
        let e = Evaluated { fitness, feas };
        cache.insert(arch.index(), e.clone());
        Ok(e)
    };
    let mut log = SearchLog::default();
    let mut best: Option<(f64, usize)> = None;
    let mut record = |log: &mut SearchLog, arch: &ArchSpec, ev: Evaluated, parent: Option<usize>| -> usize {
        let pos = log.entries.len();
        if ev.feas.feasible {
            if let Some(f) = ev.fitness {
                if best.is_none_or(|(b, _)| f > b) {
                    best = Some((f, pos));
                }
            }
        }
        log.entries.push(LogEntry {
            cycle: pos,
            arch: arch.to_string(),
            arch_index: arch.index(),
            fitness: ev.fitness,
            predicted: ev.feas.predicted,
            feasible: ev.feas.feasible,
            reason: ev.feas.reason,
            parent,
            best_so_far: best.map(|(b, _)| b),
        });
        pos
    };

    let t_init = Instant::now();
    let mut population: VecDeque<Member> = VecDeque::with_capacity(cfg.population_size);
    for _ in 0..cfg.population_size {
        let arch = sample(cfg.space, &mut rng);
        let ev = evaluate(&arch, &mut timers)?;
        let (fitness, feasible) = (ev.fitness, ev.feas.feasible);
        let log_pos = record(&mut log, &arch, ev, None);
        population.push_back(Member {
            log_pos,
            arch,
            fitness,
            feasible,
        });
    }
    let init_seconds = t_init.elapsed().as_secs_f64();

    let t_evolve = Instant::now();
    let mut mutation_seconds = 0.0;
    for _ in cfg.population_size..cfg.cycles {
        let picks = index::sample(&mut rng, population.len(), cfg.tournament_size);
        let mut parent = &population[picks.index(0)];
        for i in picks.iter().skip(1) {
            if better(&population[i], parent) {
                parent = &population[i];
            }
        }
        let t = Instant::now();
        let child = mutate(&parent.arch, &mut rng);
        mutation_seconds += t.elapsed().as_secs_f64();
        let parent_pos = parent.log_pos;
        let ev = evaluate(&child, &mut timers)?;
        let (fitness, feasible) = (ev.fitness, ev.feas.feasible);
        let log_pos = record(&mut log, &child, ev, Some(parent_pos));
        population.push_back(Member {
            log_pos,
            arch: child,
            fitness,
            feasible,
        });
        population.pop_front();
    }
    let evolve_seconds = t_evolve.elapsed().as_secs_f64();

    log.phase_seconds.insert("init".into(), init_seconds);
    log.phase_seconds.insert("evolve".into(), evolve_seconds);
    log.phase_seconds.insert("fitness".into(), timers.fitness);
    log.phase_seconds.insert("constraints".into(), timers.constraints);
    log.phase_seconds.insert("mutation".into(), mutation_seconds);
    log.phase_seconds.insert("total".into(), started.elapsed().as_secs_f64());
    let (best_arch, best_fitness) = match best {
        Some((f, pos)) => {
            let idx = log.entries[pos].arch_index;
            (Some(ArchSpec::decode(cfg.space, idx).expect("logged index is valid")), Some(f))
        }
        None => {
            log.error = Some("no feasible architecture found".into());
            (None, None)
        }
    };
    Ok(SearchOutcome {
        best: best_arch,
        best_fitness,
        log,
    })
}

/// Re-predict every feasible-flagged entry and return the positions that
/// no longer satisfy the constraints.
pub fn recheck_feasible(
    log: &SearchLog,
    space: SpaceId,
    evaluator: Option<&Evaluator>,
    constraints: &[Constraint],
) -> Result<Vec<usize>, SearchError> {
    let mut bad = Vec::new();
    for (pos, e) in log.entries.iter().enumerate().filter(|(_, e)| e.feasible) {
        let arch = ArchSpec::decode(space, e.arch_index).map_err(|err| SearchError::Config(err.to_string()))?;
        if !constraint_filter(&arch, evaluator, constraints)?.feasible {
            bad.push(pos);
        }
    }
    Ok(bad)
}

/// Machine-readable result of a search run. The oracle report gives the
/// ground truth for the returned architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub space: SpaceId,
    pub cycles: usize,
    pub seed: u64,
    pub fitness_kind: FitnessKind,
    pub constraints: Vec<Constraint>,
    pub best_arch: Option<String>,
    pub best_index: Option<usize>,
    pub best_fitness: Option<f64>,
    pub best_predicted: BTreeMap<String, f64>,
    pub oracle: Option<CostReport>,
    pub feasible_entries: usize,
    pub distinct_feasible: usize,
    pub phase_seconds: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn summarize(
    cfg: &SearchConfig,
    constraints: &[Constraint],
    outcome: &SearchOutcome,
    profiles: &[DeviceProfile],
    oracle: &OracleOptions,
) -> Result<SearchSummary, CostError> {
    let best_entry = outcome
        .best
        .as_ref()
        .and_then(|b| outcome.log.entries.iter().find(|e| e.feasible && e.arch_index == b.index()));
    let report = match &outcome.best {
        Some(b) => Some(cost_report(b, profiles, oracle, cfg.seed)?),
        None => None,
    };
    Ok(SearchSummary {
        space: cfg.space,
        cycles: cfg.cycles,
        seed: cfg.seed,
        fitness_kind: cfg.fitness,
        constraints: constraints.to_vec(),
        best_arch: outcome.best.as_ref().map(|b| b.to_string()),
        best_index: outcome.best.as_ref().map(ArchSpec::index),
        best_fitness: outcome.best_fitness,
        best_predicted: best_entry.map(|e| e.predicted.clone()).unwrap_or_default(),
        oracle: report,
        feasible_entries: outcome.log.feasible_count(),
        distinct_feasible: outcome.log.distinct_feasible(),
        phase_seconds: outcome.log.phase_seconds.clone(),
        error: outcome.log.error.clone(),
    })
}
