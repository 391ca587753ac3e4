//! In-memory experiment steps shared by the sub-commands and the tests.

use nalgebra::DMatrix;
use rayon::prelude::*;
use rfmsteer::metrics::{
    class_probabilities, frechet_distance, mmd, pearson, probe_accuracy, smooth, trend_stats,
};
use rfmsteer::rfm::search::{search_probe, SearchOutcome};
use rfmsteer::rfm::scoring::{accuracy, r_squared};
use rfmsteer::rfm::{stack_layer_outputs, train_aggregation_model};
use rfmsteer::rng::derive_seed;
use rfmsteer::steering::build_crossfade_plan;
use rfmsteer::{
    generate, ConceptKind, ConceptProbe, Dataset, FeatureSet, FrozenModel, HyperSearchSpace,
    LayerWeightScheme, PlanEntry, Pooling, Provenance, RecordOptions, RfmConfig, Schedule,
    ScheduleKind, Split, SteeringDirection, SteeringPlan, Targets, Tolerance, TrendStats,
    WeightKind,
};
use serde::{Deserialize, Serialize};

use crate::config::{ConceptConfig, ExperimentConfig, ProbeConfig};
use crate::error::{CliError, CliResult};

/// Stream tags mixed into the master seed.
pub mod streams {
    pub const MODEL: u64 = 0;
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SEARCH: u64 = 3;
    pub const GENERATION: u64 = 4;
    pub const GATE: u64 = 5;
    pub const TRACE: u64 = 6;
    pub const DIRECTION: u64 = 7;
}

pub fn stream_seed(master: u64, stream: u64) -> u64 {
    derive_seed(master, stream)
}

pub fn build_model(config: &ExperimentConfig) -> CliResult<FrozenModel> {
    Ok(FrozenModel::build(
        config.model,
        stream_seed(config.seed, streams::MODEL),
    )?)
}

pub fn synthesize(config: &ExperimentConfig, index: usize) -> CliResult<Dataset> {
    let c = &config.concepts[index];
    let seed = derive_seed(stream_seed(config.seed, streams::DATA), index as u64);
    Ok(Dataset::synthesize(&c.spec(), config.model.vocab, c.n_per_class, seed)?)
}

/// The first `cap` sequences of every class.
pub fn capped_rows(dataset: &Dataset, cap: usize) -> Vec<usize> {
    let mut seen = vec![0usize; dataset.spec.classes()];
    (0..dataset.len())
        .filter(|&i| {
            let c = &mut seen[dataset.labels[i]];
            *c += 1;
            *c <= cap
        })
        .collect()
}

pub fn subset(dataset: &Dataset, rows: &[usize]) -> Dataset {
    Dataset {
        spec: dataset.spec.clone(),
        vocab: dataset.vocab,
        sequences: rows.iter().map(|&i| dataset.sequences[i].clone()).collect(),
        labels: rows.iter().map(|&i| dataset.labels[i]).collect(),
    }
}

/// What a concept's evaluation probe measures on a batch of generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Fraction predicted as this class.
    Class(usize),
    /// Fraction predicted positive.
    Positive,
    /// Mean predicted value; not an accuracy.
    Value,
}

impl Objective {
    pub fn for_concept(kind: &ConceptKind, class: usize) -> Self {
        match kind {
            ConceptKind::Dominance { .. } => Objective::Class(class),
            ConceptKind::Motif { .. } => Objective::Positive,
            ConceptKind::Period { .. } => Objective::Value,
        }
    }

    pub fn is_accuracy(&self) -> bool {
        !matches!(self, Objective::Value)
    }
}

pub fn objective_score(probe: &ConceptProbe, objective: Objective, x: &DMatrix<f64>) -> CliResult<f64> {
    let n = x.nrows();
    Ok(match objective {
        Objective::Class(c) => probe_accuracy(probe, x, &vec![c; n])?,
        Objective::Positive => probe_accuracy(probe, x, &vec![1; n])?,
        Objective::Value => probe.predict_values(x)?.iter().sum::<f64>() / n as f64,
    })
}

pub fn base_rfm(probe: &ProbeConfig) -> RfmConfig {
    RfmConfig {
        iterations: probe.iterations,
        exponent: probe.exponent,
        ..RfmConfig::default()
    }
}

/// Held-out quality: accuracy for classification, R² for regression.
pub fn test_metric(probe: &ConceptProbe, x: &DMatrix<f64>, targets: &Targets, rows: &[usize]) -> CliResult<f64> {
    let xt = x.select_rows(rows);
    Ok(match targets {
        Targets::Regression(y) => {
            let yt: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            r_squared(&probe.predict_values(&xt)?, &yt)
        }
        _ => {
            let labels = targets.class_labels().expect("classification targets");
            let yt: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            accuracy(&probe.predict_classes(&xt)?, &yt)
        }
    })
}

pub struct LayerProbe {
    pub probe: ConceptProbe,
    pub search: SearchOutcome,
    pub test_metric: f64,
}

/// Searches and fits one probe per layer; `features[ℓ]` is `n × d`.
pub fn train_layer_probes(
    features: &[DMatrix<f64>],
    targets: &Targets,
    split: &Split,
    config: &ProbeConfig,
    seed: u64,
) -> CliResult<Vec<LayerProbe>> {
    let space = HyperSearchSpace::layerwise().with_draws(config.search_draws);
    let base = base_rfm(config);
    features
        .par_iter()
        .enumerate()
        .map(|(l, x)| {
            let (mut probe, search) = search_probe(x, targets, split, &space, &base, derive_seed(seed, l as u64))?;
            probe.layer = Some(l);
            probe.pooling = config.pooling;
            let test_metric = test_metric(&probe, x, targets, &split.test)?;
            Ok(LayerProbe {
                probe,
                search,
                test_metric,
            })
        })
        .collect()
}

pub fn train_aggregate(
    probes: &[ConceptProbe],
    features: &[DMatrix<f64>],
    targets: &Targets,
    split: &Split,
    config: &ProbeConfig,
    seed: u64,
) -> CliResult<LayerProbe> {
    let stacked = stack_layer_outputs(probes, features)?;
    let space = HyperSearchSpace::aggregation().with_draws(config.aggregation_draws);
    let (mut probe, search) =
        train_aggregation_model(&stacked, probes.len(), targets, split, &space, &base_rfm(config), seed)?;
    probe.pooling = config.pooling;
    let test_metric = test_metric(&probe, &stacked, targets, &split.test)?;
    Ok(LayerProbe {
        probe,
        search,
        test_metric,
    })
}

/// Per-layer steering directions of one concept (or one class of it) with
/// the validation scores that drive layer weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub concept: String,
    pub label: String,
    pub class: Option<usize>,
    pub scores: Vec<f64>,
    pub directions: Vec<SteeringDirection>,
}

pub fn direction_label(concept: &str, class: Option<usize>) -> String {
    match class {
        Some(c) => format!("{concept}_c{c}"),
        None => concept.to_string(),
    }
}

/// Directions from binary or regression layer probes.
pub fn directions_from_probes(concept: &str, class: Option<usize>, probes: &[ConceptProbe]) -> CliResult<DirectionSet> {
    let label = direction_label(concept, class);
    let directions = probes
        .iter()
        .map(|p| p.extract_direction(&label))
        .collect::<rfmsteer::Result<Vec<_>>>()?;
    Ok(DirectionSet {
        concept: concept.to_string(),
        label,
        class,
        scores: probes.iter().map(|p| p.val_score).collect(),
        directions,
    })
}

/// One-vs-rest probes for class `c` of a dominance concept, then directions.
pub fn class_directions(
    concept: &str,
    dataset: &Dataset,
    features: &[DMatrix<f64>],
    split: &Split,
    class: usize,
    config: &ProbeConfig,
    seed: u64,
) -> CliResult<(DirectionSet, Vec<LayerProbe>)> {
    let targets = dataset.one_vs_rest(class);
    let probes = train_layer_probes(features, &targets, split, config, derive_seed(seed, class as u64))?;
    let plain: Vec<ConceptProbe> = probes.iter().map(|p| p.probe.clone()).collect();
    Ok((directions_from_probes(concept, Some(class), &plain)?, probes))
}

/// Direction sets a config needs, as `(concept index, class)`.
pub fn required_directions(config: &ExperimentConfig) -> Vec<(usize, Option<usize>)> {
    let mut out: Vec<(usize, Option<usize>)> = Vec::new();
    let mut push = |name: &str, class: usize| {
        if let Some((i, c)) = config.concept(name) {
            let key = match c.kind {
                ConceptKind::Dominance { .. } => (i, Some(class)),
                _ => (i, None),
            };
            if !out.contains(&key) {
                out.push(key);
            }
        }
    };
    let s = &config.steering;
    push(&s.concept, s.class);
    if !config.trace.schedules.is_empty() {
        push(&s.concept, config.trace.crossfade.from);
        push(&s.concept, config.trace.crossfade.to);
    }
    if s.pairwise.enabled {
        for pair in &s.pairwise.pairs {
            for name in pair {
                push(name, pairwise_class(config, name));
            }
        }
    }
    out.sort();
    out
}

/// Class steered for a dominance concept in pairwise mode.
pub fn pairwise_class(config: &ExperimentConfig, name: &str) -> usize {
    if name == config.steering.concept {
        config.steering.class
    } else {
        0
    }
}

pub fn plan_entry(
    dirs: &DirectionSet,
    eta0: f64,
    schedule: Schedule,
    weighting: WeightKind,
    base_weight: f64,
) -> CliResult<PlanEntry> {
    let scheme = LayerWeightScheme::new(weighting, base_weight, dirs.scores.clone());
    Ok(PlanEntry::new(dirs.label.clone(), dirs.directions.clone(), eta0, schedule, scheme)?)
}

/// Generated tokens and their pooled features (re-forwarded without steering).
pub struct Batch {
    pub seeds: Vec<u64>,
    pub tokens: Vec<Vec<usize>>,
    /// Per generation, `L × d`.
    pub pooled: Vec<DMatrix<f64>>,
}

impl Batch {
    /// `n × d` features of layer `l`.
    pub fn layer(&self, l: usize) -> DMatrix<f64> {
        let d = self.pooled.first().map_or(0, |p| p.ncols());
        DMatrix::from_fn(self.pooled.len(), d, |i, j| self.pooled[i][(l, j)])
    }

    pub fn final_features(&self) -> DMatrix<f64> {
        let l = self.pooled.first().map_or(1, |p| p.nrows());
        self.layer(l - 1)
    }
}

/// `n` generations with prompt `[i mod V]` and seed `derive_seed(seed, i)`.
/// The same `seed` across cells gives common random numbers.
pub fn generate_batch(
    model: &FrozenModel,
    plan: Option<&SteeringPlan>,
    n: usize,
    steps: usize,
    seed: u64,
    pooling: Pooling,
) -> CliResult<Batch> {
    let out: Vec<(u64, Vec<usize>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let trace = generate(model, &[i % model.vocab()], steps, s, plan, &RecordOptions::default())?;
            let pooled = model.extract_features(&trace.tokens, pooling)?;
            Ok((s, trace.tokens, pooled))
        })
        .collect::<rfmsteer::Result<_>>()?;
    let mut batch = Batch {
        seeds: Vec::with_capacity(n),
        tokens: Vec::with_capacity(n),
        pooled: Vec::with_capacity(n),
    };
    for (s, t, p) in out {
        batch.seeds.push(s);
        batch.tokens.push(t);
        batch.pooled.push(p);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub fd: f64,
    pub mmd: f64,
    pub score: f64,
}

/// FD and MMD between final-layer features of `baseline` and `steered`, plus
/// the objective score of `steered` under `probe`.
pub fn cell_metrics(
    baseline: &DMatrix<f64>,
    steered: &Batch,
    probe: &ConceptProbe,
    objective: Objective,
    eval_layer: usize,
) -> CliResult<CellMetrics> {
    let a = FeatureSet::new(baseline.clone(), Provenance::Baseline)?;
    let b = FeatureSet::new(steered.final_features(), Provenance::Steered)?;
    Ok(CellMetrics {
        fd: frechet_distance(&a, &b)?,
        mmd: mmd(&a, &b, None)?,
        score: objective_score(probe, objective, &steered.layer(eval_layer))?,
    })
}

pub fn trend(xs: &[f64], ys: &[f64], tolerance: Tolerance) -> CliResult<TrendStats> {
    Ok(trend_stats(xs, ys, tolerance)?)
}

/// Per-step class probabilities averaged over `n` generations, before
/// smoothing. Returns one series per requested class.
#[allow(clippy::too_many_arguments)]
pub fn averaged_class_series(
    model: &FrozenModel,
    plan: &SteeringPlan,
    probe: &ConceptProbe,
    classes: &[usize],
    n: usize,
    steps: usize,
    seed: u64,
    window: Option<usize>,
) -> CliResult<Vec<Vec<f64>>> {
    let layer = probe
        .layer
        .ok_or_else(|| CliError::Runtime("trace probe has no layer".into()))?;
    let record = RecordOptions::layers([layer]);
    let per_gen: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let trace = generate(
                model,
                &[i % model.vocab()],
                steps,
                derive_seed(seed, i as u64),
                Some(plan),
                &record,
            )?;
            let probs = class_probabilities(probe, &trace, window)?;
            Ok(classes.iter().map(|&c| probs.column(c).iter().copied().collect()).collect())
        })
        .collect::<rfmsteer::Result<_>>()?;
    Ok((0..classes.len())
        .map(|k| {
            let mut avg = vec![0.0; steps];
            for g in &per_gen {
                for (a, v) in avg.iter_mut().zip(&g[k]) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= n as f64);
            avg
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub schedule: ScheduleKind,
    pub phi: Vec<f64>,
    /// Smoothed mean target-class softmax.
    pub softmax: Vec<f64>,
    pub pearson: Option<f64>,
}

/// Index of the first value whose smoothing window is full.
pub fn first_full(smoothing: usize, len: usize) -> usize {
    smoothing.saturating_sub(1).min(len.saturating_sub(1))
}

pub struct TraceSetup<'a> {
    pub model: &'a FrozenModel,
    pub probe: &'a ConceptProbe,
    pub generations: usize,
    pub steps: usize,
    pub window: Option<usize>,
    pub smoothing: usize,
    pub gate_probability: f64,
    pub weighting: WeightKind,
    pub base_weight: f64,
    pub gate_seed: u64,
    pub generation_seed: u64,
}

pub fn schedule_trace(
    setup: &TraceSetup,
    dirs: &DirectionSet,
    class: usize,
    kind: ScheduleKind,
    eta0: f64,
) -> CliResult<ScheduleTrace> {
    let schedule = Schedule::new(kind);
    let entry = plan_entry(dirs, eta0, schedule, setup.weighting, setup.base_weight)?;
    let plan = SteeringPlan::new(vec![entry], setup.gate_probability, setup.gate_seed)?;
    let raw = averaged_class_series(
        setup.model,
        &plan,
        setup.probe,
        &[class],
        setup.generations,
        setup.steps,
        setup.generation_seed,
        setup.window,
    )?;
    let softmax = smooth(&raw[0], setup.smoothing);
    let phi: Vec<f64> = (0..setup.steps).map(|t| schedule.eval(t)).collect();
    let pearson = pearson(&phi, &softmax);
    Ok(ScheduleTrace {
        schedule: kind,
        phi,
        softmax,
        pearson,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfadeTrace {
    pub phi_a: Vec<f64>,
    pub phi_b: Vec<f64>,
    pub softmax_a: Vec<f64>,
    pub softmax_b: Vec<f64>,
}

impl CrossfadeTrace {
    /// Sign changes of `a − b`.
    pub fn crossings(&self) -> usize {
        let diff: Vec<f64> = self.softmax_a.iter().zip(&self.softmax_b).map(|(a, b)| a - b).collect();
        diff.windows(2)
            .filter(|w| w[0] != 0.0 && w[1] != 0.0 && w[0].signum() != w[1].signum())
            .count()
    }
}

pub fn crossfade_trace(
    setup: &TraceSetup,
    dirs_a: &DirectionSet,
    dirs_b: &DirectionSet,
    classes: (usize, usize),
    eta0: f64,
    window: f64,
) -> CliResult<CrossfadeTrace> {
    let layers = setup.model.layers();
    let scheme_for = |d: &DirectionSet| LayerWeightScheme::new(setup.weighting, setup.base_weight, d.scores.clone());
    let plan = build_crossfade_plan(
        &dirs_a.label,
        dirs_a.directions.clone(),
        &dirs_b.label,
        dirs_b.directions.clone(),
        eta0,
        window,
        scheme_for(dirs_a),
        setup.gate_probability,
        setup.gate_seed,
    )?;
    // entry B keeps its own layer scores
    let mut plan = plan;
    let b = &mut plan.entries[1];
    *b = PlanEntry::new(b.label.clone(), b.directions.clone(), b.eta0, b.schedule, scheme_for(dirs_b))?;
    debug_assert_eq!(plan.entries[0].weights.len(), layers);
    let raw = averaged_class_series(
        setup.model,
        &plan,
        setup.probe,
        &[classes.0, classes.1],
        setup.generations,
        setup.steps,
        setup.generation_seed,
        setup.window,
    )?;
    let phi = |k: usize| -> Vec<f64> { (0..setup.steps).map(|t| plan.entries[k].schedule.eval(t)).collect() };
    Ok(CrossfadeTrace {
        phi_a: phi(0),
        phi_b: phi(1),
        softmax_a: smooth(&raw[0], setup.smoothing),
        softmax_b: smooth(&raw[1], setup.smoothing),
    })
}

/// Everything `steer`, `ablate` and `trace` need from `train-probes`.
pub struct SteeringAssets {
    pub model: FrozenModel,
    /// Evaluation probe per concept at the evaluation layer.
    pub eval_probes: Vec<ConceptProbe>,
    pub directions: Vec<DirectionSet>,
}

impl SteeringAssets {
    pub fn directions_for(&self, concept: &str, class: Option<usize>) -> CliResult<&DirectionSet> {
        let label = direction_label(concept, class);
        self.directions
            .iter()
            .find(|d| d.label == label)
            .ok_or(CliError::MissingArtifact(format!("directions for {label}")))
    }

    pub fn probe_for(&self, config: &ExperimentConfig, concept: &str) -> CliResult<&ConceptProbe> {
        let (i, _) = config
            .concept(concept)
            .ok_or_else(|| CliError::Runtime(format!("unknown concept {concept}")))?;
        Ok(&self.eval_probes[i])
    }
}

/// Class used when a concept is the steering target.
pub fn steer_class(config: &ExperimentConfig, concept: &ConceptConfig) -> Option<usize> {
    match concept.kind {
        ConceptKind::Dominance { .. } => Some(if concept.name == config.steering.concept {
            config.steering.class
        } else {
            pairwise_class(config, &concept.name)
        }),
        _ => None,
    }
}
