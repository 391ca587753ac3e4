use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rfmsteer::rfm::load_probe;
use rfmsteer::rng::derive_seed;
use rfmsteer::{ConceptProbe, Dataset, Schedule, Split, SteeringPlan, Tolerance, WeightKind};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::*;
use crate::manifest::{list_files, sha256_hex, RunManifest, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainProbes,
    Steer,
    Ablate,
    Trace,
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainProbes => "train-probes",
            Command::Steer => "steer",
            Command::Ablate => "ablate",
            Command::Trace => "trace",
            Command::Report => "report",
            Command::All => "all",
        }
    }

    pub const STAGES: [Command; 6] = [
        Command::GenData,
        Command::TrainProbes,
        Command::Steer,
        Command::Ablate,
        Command::Trace,
        Command::Report,
    ];
}

pub const CONFIG_FILE: &str = "config.toml";
pub const SCORES_FILE: &str = "scores.csv";
pub const STEER_FILE: &str = "metrics/steer.csv";
pub const PAIRWISE_FILE: &str = "metrics/pairwise.csv";
pub const TREND_FILE: &str = "metrics/ablate_trends.csv";
pub const TRACE_SUMMARY_FILE: &str = "traces/summary.csv";
pub const REPORT_FILE: &str = "report.md";

pub fn data_file(concept: &str) -> String {
    format!("data/{concept}.tsv")
}

pub fn probe_file(concept: &str, layer: usize) -> String {
    format!("probes/{concept}/layer_{layer:02}.json")
}

pub fn direction_file(label: &str) -> String {
    format!("directions/{label}.json")
}

/// Metric CSV header shared by the steering and ablation tables.
pub const METRIC_HEADER: [&str; 11] = [
    "run_id", "concept", "eta0", "schedule", "p", "kappa", "k", "fd", "mmd", "accuracy", "seed",
];

fn num(v: f64) -> String {
    format!("{v:.8}")
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    manifest: RunManifest,
    command: &'static str,
}

impl<'a> Run<'a> {
    fn open(config: &'a ExperimentConfig, out: &'a Path, command: &'static str) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
        let text = config.to_toml();
        let sha = sha256_hex(text.as_bytes());
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), config.seed);
        for (name, s) in [
            ("model", streams::MODEL),
            ("data", streams::DATA),
            ("split", streams::SPLIT),
            ("search", streams::SEARCH),
            ("generation", streams::GENERATION),
            ("gate", streams::GATE),
            ("trace", streams::TRACE),
            ("direction", streams::DIRECTION),
        ] {
            seeds.insert(name.to_string(), stream_seed(config.seed, s));
        }
        let manifest = RunManifest::open(out, &sha, seeds)?;
        let mut run = Self {
            config,
            out,
            manifest,
            command,
        };
        run.write(CONFIG_FILE, text.as_bytes())?;
        Ok(run)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        self.manifest.record(self.out, rel, self.command)
    }

    fn save_probe(&mut self, rel: &str, probe: &ConceptProbe) -> CliResult<()> {
        let json = rfmsteer::rfm::probe_to_json(probe)?;
        self.write(rel, json.as_bytes())
    }

    fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(rel, &bytes)
    }

    fn require(&self, rel: &str) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact(path.display().to_string()))
        }
    }

    fn finish(mut self, started: Instant) -> CliResult<()> {
        self.manifest
            .timings
            .insert(self.command.to_string(), started.elapsed().as_secs_f64());
        // Drop records of files that no longer exist.
        let present = list_files(self.out)?;
        self.manifest.artifacts.retain(|k, _| present.contains(k));
        self.manifest.save(self.out)?;
        Ok(())
    }
}

pub fn run_command(command: Command, config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    if command == Command::All {
        for stage in Command::STAGES {
            run_command(stage, config, out)?;
        }
        return Ok(());
    }
    let started = Instant::now();
    let mut run = Run::open(config, out, command.name())?;
    log::info!("{} -> {}", command.name(), out.display());
    match command {
        Command::GenData => gen_data(&mut run)?,
        Command::TrainProbes => train_probes(&mut run)?,
        Command::Steer => steer(&mut run)?,
        Command::Ablate => ablate(&mut run)?,
        Command::Trace => trace(&mut run)?,
        Command::Report => report(&mut run)?,
        Command::All => unreachable!(),
    }
    run.finish(started)
}

fn gen_data(run: &mut Run) -> CliResult<()> {
    for (i, c) in run.config.concepts.iter().enumerate() {
        let ds = synthesize(run.config, i)?;
        run.write(&data_file(&c.name), ds.to_tsv()?.as_bytes())?;
        println!("{}: {} records, class counts {:?}", c.name, ds.len(), ds.class_counts());
    }
    Ok(())
}

fn load_dataset(run: &Run, concept: &str) -> CliResult<Dataset> {
    Ok(Dataset::load(&run.require(&data_file(concept))?)?)
}

fn search_rows(layer: &str, probe: &LayerProbe) -> Vec<Vec<String>> {
    probe
        .search
        .trials
        .iter()
        .map(|t| {
            vec![
                layer.to_string(),
                t.index.to_string(),
                num(t.config.kernel.bandwidth),
                num(t.config.kernel.q),
                num(t.config.kernel.p),
                num(t.config.ridge),
                t.config.centered.to_string(),
                t.score.map(num).unwrap_or_default(),
                t.error.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

const SEARCH_HEADER: [&str; 9] = ["layer", "trial", "bandwidth", "q", "p", "ridge", "centered", "score", "error"];

fn train_probes(run: &mut Run) -> CliResult<()> {
    let config = run.config;
    let model = build_model(config)?;
    let needed = required_directions(config);
    let split_seed = stream_seed(config.seed, streams::SPLIT);
    let search_seed = stream_seed(config.seed, streams::SEARCH);
    let direction_seed = stream_seed(config.seed, streams::DIRECTION);
    let mut score_rows = Vec::new();
    for (i, c) in config.concepts.iter().enumerate() {
        let full = load_dataset(run, &c.name)?;
        let ds = subset(&full, &capped_rows(&full, config.probe.samples_per_class));
        let features = model.dataset_features(&ds.sequences, config.probe.pooling)?;
        let split = Split::stratified(&ds.labels, derive_seed(split_seed, i as u64));
        let targets = ds.targets();
        let probes = train_layer_probes(&features, &targets, &split, &config.probe, derive_seed(search_seed, i as u64))?;
        let metric = if c.spec().is_regression() { "neg_mse" } else { "auc" };
        let test_name = if c.spec().is_regression() { "r2" } else { "accuracy" };
        let mut search = Vec::new();
        for (l, p) in probes.iter().enumerate() {
            let rel = probe_file(&c.name, l);
            run.save_probe(&rel, &p.probe)?;
            score_rows.push(score_row(&c.name, &l.to_string(), metric, test_name, p));
            search.extend(search_rows(&l.to_string(), p));
        }
        if config.probe.aggregation {
            let plain: Vec<ConceptProbe> = probes.iter().map(|p| p.probe.clone()).collect();
            let agg = train_aggregate(&plain, &features, &targets, &split, &config.probe, derive_seed(search_seed, 1000 + i as u64))?;
            let rel = format!("probes/{}/aggregate.json", c.name);
            run.save_probe(&rel, &agg.probe)?;
            score_rows.push(score_row(&c.name, "aggregate", metric, test_name, &agg));
            search.extend(search_rows("aggregate", &agg));
        }
        run.write_csv(&format!("probes/{}/search.csv", c.name), &SEARCH_HEADER, &search)?;
        println!(
            "{}: {} layer probes, best validation {metric} {:.4}",
            c.name,
            probes.len(),
            probes.iter().map(|p| p.probe.val_score).fold(f64::MIN, f64::max)
        );

        for &(_, class) in needed.iter().filter(|(k, _)| *k == i) {
            let dirs = match class {
                Some(cls) => class_directions(&c.name, &ds, &features, &split, cls, &config.probe, derive_seed(direction_seed, i as u64))?.0,
                None => {
                    let plain: Vec<ConceptProbe> = probes.iter().map(|p| p.probe.clone()).collect();
                    directions_from_probes(&c.name, None, &plain)?
                }
            };
            let rel = direction_file(&dirs.label);
            run.write(&rel, serde_json::to_string(&dirs)?.as_bytes())?;
        }
    }
    run.write_csv(
        SCORES_FILE,
        &["concept", "layer", "task", "metric", "val_score", "test_metric", "test_value", "best_iteration", "bandwidth", "q", "p", "ridge", "centered"],
        &score_rows,
    )
}

fn score_row(concept: &str, layer: &str, metric: &str, test_name: &str, p: &LayerProbe) -> Vec<String> {
    let k = &p.probe.model.params;
    vec![
        concept.to_string(),
        layer.to_string(),
        p.probe.task.name(),
        metric.to_string(),
        num(p.probe.val_score),
        test_name.to_string(),
        num(p.test_metric),
        p.probe.best_iteration.to_string(),
        num(k.bandwidth),
        num(k.q),
        num(k.p),
        num(p.probe.model.ridge),
        p.probe.centered.to_string(),
    ]
}

fn load_assets(run: &Run) -> CliResult<SteeringAssets> {
    let config = run.config;
    let model = build_model(config)?;
    let layer = config.eval_layer();
    let eval_probes = config
        .concepts
        .iter()
        .map(|c| Ok(load_probe(&run.require(&probe_file(&c.name, layer))?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let directions = required_directions(config)
        .into_iter()
        .map(|(i, class)| {
            let label = direction_label(&config.concepts[i].name, class);
            let text = std::fs::read_to_string(run.require(&direction_file(&label))?)
                .map_err(|e| CliError::io(format!("reading directions {label}"), e))?;
            let dirs: DirectionSet = serde_json::from_str(&text)?;
            if dirs.directions.iter().any(|d| d.vector.len() != model.hidden()) {
                return Err(CliError::Runtime(format!(
                    "directions {label} do not match the model width {}",
                    model.hidden()
                )));
            }
            Ok(dirs)
        })
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(p) = eval_probes.iter().find(|p| p.input_dim() != model.hidden()) {
        return Err(CliError::Runtime(format!(
            "probe input width {} does not match the model width {}",
            p.input_dim(),
            model.hidden()
        )));
    }
    Ok(SteeringAssets {
        model,
        eval_probes,
        directions,
    })
}

fn weighting_cols(w: &WeightKind) -> (String, String) {
    match w {
        WeightKind::Exponential { kappa } => (num(*kappa), String::new()),
        WeightKind::TopK { k } => (String::new(), k.to_string()),
        _ => (String::new(), String::new()),
    }
}

fn weighting_name(w: &WeightKind) -> &'static str {
    match w {
        WeightKind::Uniform => "uniform",
        WeightKind::Linear => "linear",
        WeightKind::Exponential { .. } => "exponential",
        WeightKind::TopK { .. } => "top-k",
    }
}

/// One steered cell of a grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub run_id: String,
    pub eta0: f64,
    pub schedule: rfmsteer::ScheduleKind,
    pub p: f64,
    pub weighting: WeightKind,
}

pub struct GridResult {
    pub cell: GridCell,
    pub metrics: CellMetrics,
    pub batch: Batch,
}

/// Runs cells in order against a shared unsteered baseline; all cells share
/// generation and gate seeds.
pub fn run_grid(
    config: &ExperimentConfig,
    assets: &SteeringAssets,
    baseline: &Batch,
    cells: &[GridCell],
) -> CliResult<Vec<GridResult>> {
    let s = &config.steering;
    let (_, target) = config
        .concept(&s.concept)
        .ok_or_else(|| CliError::Runtime(format!("unknown concept {}", s.concept)))?;
    let dirs = assets.directions_for(&s.concept, steer_class(config, target))?;
    let probe = assets.probe_for(config, &s.concept)?;
    let objective = Objective::for_concept(&target.kind, s.class);
    let gen_seed = stream_seed(config.seed, streams::GENERATION);
    let gate_seed = stream_seed(config.seed, streams::GATE);
    let base_final = baseline.final_features();
    cells
        .iter()
        .map(|cell| {
            let entry = plan_entry(dirs, cell.eta0, Schedule::new(cell.schedule), cell.weighting, s.base_weight)?;
            let plan = SteeringPlan::new(vec![entry], cell.p, gate_seed)?;
            let batch = generate_batch(&assets.model, Some(&plan), s.generations, s.steps, gen_seed, config.probe.pooling)?;
            let metrics = cell_metrics(&base_final, &batch, probe, objective, config.eval_layer())?;
            log::info!("{} eta0 {} p {}: {:?}", cell.run_id, cell.eta0, cell.p, metrics);
            Ok(GridResult {
                cell: cell.clone(),
                metrics,
                batch,
            })
        })
        .collect()
}

pub fn baseline_batch(config: &ExperimentConfig, assets: &SteeringAssets) -> CliResult<Batch> {
    let s = &config.steering;
    generate_batch(
        &assets.model,
        None,
        s.generations,
        s.steps,
        stream_seed(config.seed, streams::GENERATION),
        config.probe.pooling,
    )
}

fn metric_row(config: &ExperimentConfig, r: &GridResult, schedule: &str, accuracy: bool) -> Vec<String> {
    let (kappa, k) = weighting_cols(&r.cell.weighting);
    vec![
        r.cell.run_id.clone(),
        config.steering.concept.clone(),
        num(r.cell.eta0),
        schedule.to_string(),
        num(r.cell.p),
        kappa,
        k,
        num(r.metrics.fd),
        num(r.metrics.mmd),
        if accuracy { num(r.metrics.score) } else { String::new() },
        stream_seed(config.seed, streams::GENERATION).to_string(),
    ]
}

fn token_rows(results: &[(&str, &Batch)]) -> String {
    let mut out = String::from("run_id\tgeneration\tseed\ttokens\n");
    for (id, b) in results {
        for (i, (s, t)) in b.seeds.iter().zip(&b.tokens).enumerate() {
            let toks: Vec<String> = t.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{id}\t{i}\t{s}\t{}", toks.join(" "));
        }
    }
    out
}

fn steer(run: &mut Run) -> CliResult<()> {
    let config = run.config;
    let s = &config.steering;
    let assets = load_assets(run)?;
    let (_, target) = config.concept(&s.concept).expect("validated");
    let accuracy = Objective::for_concept(&target.kind, s.class).is_accuracy();
    let baseline = baseline_batch(config, &assets)?;

    let mut cells = Vec::new();
    if s.control {
        cells.push(GridCell {
            run_id: "control".into(),
            eta0: 0.0,
            schedule: s.schedules[0],
            p: s.gate_probability,
            weighting: s.weightings[0],
        });
    }
    let mut index = 0;
    for &schedule in &s.schedules {
        for &weighting in &s.weightings {
            for &eta0 in &s.eta0 {
                cells.push(GridCell {
                    run_id: format!("cell-{index:03}"),
                    eta0,
                    schedule,
                    p: s.gate_probability,
                    weighting,
                });
                index += 1;
            }
        }
    }
    let results = run_grid(config, &assets, &baseline, &cells)?;

    let probe = assets.probe_for(config, &s.concept)?;
    let objective = Objective::for_concept(&target.kind, s.class);
    let base_score = objective_score(probe, objective, &baseline.layer(config.eval_layer()))?;
    let mut rows = vec![vec![
        "baseline".to_string(),
        s.concept.clone(),
        num(0.0),
        "none".into(),
        String::new(),
        String::new(),
        String::new(),
        num(0.0),
        num(0.0),
        if accuracy { num(base_score) } else { String::new() },
        stream_seed(config.seed, streams::GENERATION).to_string(),
    ]];
    for r in &results {
        rows.push(metric_row(config, r, r.cell.schedule.name(), accuracy));
        println!(
            "{} eta0 {:.2} {} {}: fd {:.4} mmd {:.4} score {:.3}",
            r.cell.run_id,
            r.cell.eta0,
            r.cell.schedule.name(),
            weighting_name(&r.cell.weighting),
            r.metrics.fd,
            r.metrics.mmd,
            r.metrics.score
        );
    }
    run.write_csv(STEER_FILE, &METRIC_HEADER, &rows)?;
    let mut tokens: Vec<(&str, &Batch)> = vec![("baseline", &baseline)];
    tokens.extend(results.iter().map(|r| (r.cell.run_id.as_str(), &r.batch)));
    run.write("generations/steer.tsv", token_rows(&tokens).as_bytes())?;

    if s.pairwise.enabled && !s.pairwise.pairs.is_empty() {
        pairwise(run, &assets, &baseline)?;
    }
    Ok(())
}

fn pairwise(run: &mut Run, assets: &SteeringAssets, baseline: &Batch) -> CliResult<()> {
    let config = run.config;
    let s = &config.steering;
    let gen_seed = stream_seed(config.seed, streams::GENERATION);
    let gate_seed = stream_seed(config.seed, streams::GATE);
    let layer = config.eval_layer();
    let base_final = baseline.final_features();
    let weighting = s.weightings[0];
    let mut rows = Vec::new();
    let mut index = 0;
    for pair in &s.pairwise.pairs {
        let parts: Vec<_> = pair
            .iter()
            .map(|name| {
                let (_, c) = config.concept(name).expect("validated");
                let class = steer_class(config, c);
                let objective = Objective::for_concept(&c.kind, class.unwrap_or(0));
                Ok((assets.directions_for(name, class)?, assets.probe_for(config, name)?, objective))
            })
            .collect::<CliResult<_>>()?;
        let base_scores: Vec<f64> = parts
            .iter()
            .map(|(_, probe, obj)| objective_score(probe, *obj, &baseline.layer(layer)))
            .collect::<CliResult<_>>()?;
        for combo in &s.pairwise.combos {
            let entries = parts
                .iter()
                .zip(combo)
                .map(|((dirs, _, _), &eta)| plan_entry(dirs, eta, Schedule::constant(), weighting, s.base_weight))
                .collect::<CliResult<Vec<_>>>()?;
            let plan = SteeringPlan::new(entries, s.gate_probability, gate_seed)?;
            let batch = generate_batch(&assets.model, Some(&plan), s.generations, s.steps, gen_seed, config.probe.pooling)?;
            let a = rfmsteer::FeatureSet::new(base_final.clone(), rfmsteer::Provenance::Baseline)?;
            let b = rfmsteer::FeatureSet::new(batch.final_features(), rfmsteer::Provenance::Steered)?;
            let fd = rfmsteer::metrics::frechet_distance(&a, &b)?;
            let mmd = rfmsteer::metrics::mmd(&a, &b, None)?;
            let x = batch.layer(layer);
            let mut row = vec![format!("pair-{index:03}"), pair[0].clone(), pair[1].clone(), num(combo[0]), num(combo[1])];
            for (k, (_, probe, obj)) in parts.iter().enumerate() {
                row.push(num(objective_score(probe, *obj, &x)?));
                row.push(num(base_scores[k]));
            }
            row.extend([num(fd), num(mmd), gen_seed.to_string()]);
            println!("pairwise {} {}+{} ({:.2}, {:.2}): {:?}", index, pair[0], pair[1], combo[0], combo[1], &row[5..9]);
            rows.push(row);
            index += 1;
        }
    }
    run.write_csv(
        PAIRWISE_FILE,
        &["run_id", "concept_a", "concept_b", "eta_a", "eta_b", "score_a", "baseline_a", "score_b", "baseline_b", "fd", "mmd", "seed"],
        &rows,
    )
}

fn ablate(run: &mut Run) -> CliResult<()> {
    let config = run.config;
    let s = &config.steering;
    let a = &config.ablation;
    let assets = load_assets(run)?;
    let baseline = baseline_batch(config, &assets)?;
    let (_, target) = config.concept(&s.concept).expect("validated");
    let accuracy = Objective::for_concept(&target.kind, s.class).is_accuracy();
    let schedule = rfmsteer::ScheduleKind::Constant;
    let default_weighting = s.weightings[0];

    let sweeps: Vec<(&str, Vec<f64>, Vec<GridCell>)> = vec![
        (
            "p",
            a.p_values.clone(),
            a.p_values
                .iter()
                .enumerate()
                .map(|(i, &p)| GridCell {
                    run_id: format!("p-{i:02}"),
                    eta0: a.eta0,
                    schedule,
                    p,
                    weighting: default_weighting,
                })
                .collect(),
        ),
        (
            "k",
            config.k_sweep().iter().map(|&k| k as f64).collect(),
            config
                .k_sweep()
                .iter()
                .enumerate()
                .map(|(i, &k)| GridCell {
                    run_id: format!("k-{i:02}"),
                    eta0: a.eta0,
                    schedule,
                    p: s.gate_probability,
                    weighting: WeightKind::TopK { k },
                })
                .collect(),
        ),
        (
            "kappa",
            a.kappa_values.clone(),
            a.kappa_values
                .iter()
                .enumerate()
                .map(|(i, &kappa)| GridCell {
                    run_id: format!("kappa-{i:02}"),
                    eta0: a.eta0,
                    schedule,
                    p: s.gate_probability,
                    weighting: WeightKind::Exponential { kappa },
                })
                .collect(),
        ),
    ];
    let mut trend_rows = Vec::new();
    for (name, xs, cells) in sweeps {
        if cells.is_empty() {
            continue;
        }
        let results = run_grid(config, &assets, &baseline, &cells)?;
        let rows: Vec<Vec<String>> = results.iter().map(|r| metric_row(config, r, schedule.name(), accuracy)).collect();
        run.write_csv(&format!("metrics/ablate_{name}.csv"), &METRIC_HEADER, &rows)?;
        if xs.len() >= 3 {
            let series: [(&str, Vec<f64>, Tolerance); 3] = [
                ("accuracy", results.iter().map(|r| r.metrics.score).collect(), Tolerance::Absolute(0.02)),
                ("fd", results.iter().map(|r| r.metrics.fd).collect(), Tolerance::Relative(0.05)),
                ("mmd", results.iter().map(|r| r.metrics.mmd).collect(), Tolerance::Relative(0.05)),
            ];
            for (metric, ys, tol) in series {
                let t = trend(&xs, &ys, tol)?;
                let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "undefined".into());
                let tol_text = match tol {
                    Tolerance::Absolute(v) => format!("abs {v}"),
                    Tolerance::Relative(v) => format!("rel {v}"),
                };
                println!("ablate {name} {metric}: violations {} spearman {}", t.monotone_violations, opt(t.spearman));
                trend_rows.push(vec![
                    name.to_string(),
                    metric.to_string(),
                    opt(t.pearson),
                    opt(t.spearman),
                    t.monotone_violations.to_string(),
                    tol_text,
                ]);
            }
        }
    }
    run.write_csv(TREND_FILE, &["sweep", "metric", "pearson", "spearman", "violations", "tolerance"], &trend_rows)
}

fn trace(run: &mut Run) -> CliResult<()> {
    let config = run.config;
    let t = &config.trace;
    let s = &config.steering;
    let assets = load_assets(run)?;
    let probe = assets.probe_for(config, &s.concept)?;
    let setup = TraceSetup {
        model: &assets.model,
        probe,
        generations: t.generations,
        steps: t.steps,
        window: t.pooling_window(),
        smoothing: t.smoothing,
        gate_probability: t.gate_probability,
        weighting: t.weighting,
        base_weight: s.base_weight,
        gate_seed: stream_seed(config.seed, streams::GATE),
        generation_seed: stream_seed(config.seed, streams::TRACE),
    };
    let mut summary = Vec::new();
    let start = first_full(t.smoothing, t.steps);
    if !t.schedules.is_empty() {
        let dirs = assets.directions_for(&s.concept, Some(s.class))?;
        for &kind in &t.schedules {
            let tr = schedule_trace(&setup, dirs, s.class, kind, t.eta0)?;
            let rows: Vec<Vec<String>> = (0..t.steps)
                .map(|i| vec![i.to_string(), num(tr.phi[i]), num(tr.softmax[i])])
                .collect();
            run.write_csv(&format!("traces/schedule_{}.csv", kind.name()), &["t", "phi", "softmax"], &rows)?;
            let pearson = tr.pearson.map(num).unwrap_or_else(|| "undefined".into());
            println!("trace {}: pearson {pearson}", kind.name());
            summary.push(vec![
                kind.name().to_string(),
                pearson,
                num(tr.softmax[start]),
                num(tr.softmax[t.steps - 1]),
                String::new(),
            ]);
        }
        let cf = &t.crossfade;
        let dirs_a = assets.directions_for(&s.concept, Some(cf.from))?;
        let dirs_b = assets.directions_for(&s.concept, Some(cf.to))?;
        let tr = crossfade_trace(&setup, dirs_a, dirs_b, (cf.from, cf.to), cf.eta0, cf.window)?;
        let rows: Vec<Vec<String>> = (0..t.steps)
            .map(|i| {
                vec![
                    i.to_string(),
                    num(tr.phi_a[i]),
                    num(tr.phi_b[i]),
                    num(tr.softmax_a[i]),
                    num(tr.softmax_b[i]),
                ]
            })
            .collect();
        run.write_csv(
            "traces/crossfade.csv",
            &["t", "phi_a", "phi_b", &format!("softmax_c{}", cf.from), &format!("softmax_c{}", cf.to)],
            &rows,
        )?;
        let crossings = tr.crossings();
        println!(
            "crossfade: class {} {:.3} -> {:.3}, class {} {:.3} -> {:.3}, {crossings} crossings",
            cf.from,
            tr.softmax_a[start],
            tr.softmax_a[t.steps - 1],
            cf.to,
            tr.softmax_b[start],
            tr.softmax_b[t.steps - 1]
        );
        for (name, series) in [(format!("crossfade_c{}", cf.from), &tr.softmax_a), (format!("crossfade_c{}", cf.to), &tr.softmax_b)] {
            summary.push(vec![name, String::new(), num(series[start]), num(series[t.steps - 1]), crossings.to_string()]);
        }
    }
    run.write_csv(TRACE_SUMMARY_FILE, &["series", "pearson", "start", "end", "crossings"], &summary)
}

fn csv_to_markdown(path: &Path) -> CliResult<String> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), " --- |".repeat(header.len()));
    for rec in reader.records() {
        let rec = rec?;
        let _ = writeln!(md, "| {} |", rec.iter().collect::<Vec<_>>().join(" | "));
    }
    Ok(md)
}

fn report(run: &mut Run) -> CliResult<()> {
    let config = run.config;
    let mut md = String::from("# Steering experiment report\n\n");
    let _ = writeln!(
        md,
        "Seed {}, model {} layers × {} hidden, vocabulary {}. FD and MMD compare pooled final-layer features of the toy model.\n",
        config.seed, config.model.layers, config.model.hidden, config.model.vocab
    );
    let sections = [
        ("Probe scores", SCORES_FILE),
        ("Steering grid", STEER_FILE),
        ("Pairwise steering", PAIRWISE_FILE),
        ("Ablation: injection probability", "metrics/ablate_p.csv"),
        ("Ablation: top-K layers", "metrics/ablate_k.csv"),
        ("Ablation: exponential κ", "metrics/ablate_kappa.csv"),
        ("Ablation trends", TREND_FILE),
        ("Temporal traces", TRACE_SUMMARY_FILE),
    ];
    let mut found = 0;
    for (title, rel) in sections {
        let path = run.path(rel);
        if path.exists() {
            let _ = writeln!(md, "## {title}\n\n{}", csv_to_markdown(&path)?);
            found += 1;
        } else {
            let _ = writeln!(md, "## {title}\n\nNot run.\n");
        }
    }
    if found == 0 {
        return Err(CliError::MissingArtifact(format!("{} (no stage outputs)", run.path(SCORES_FILE).display())));
    }
    run.write(REPORT_FILE, md.as_bytes())?;
    println!("wrote {}", run.path(REPORT_FILE).display());
    Ok(())
}

/// Files in `out` missing from its manifest (the manifest itself excluded).
pub fn unlisted_files(out: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE))
        .map_err(|e| CliError::io("reading manifest", e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    Ok(list_files(out)?
        .into_iter()
        .filter(|f| f != MANIFEST_FILE && !manifest.artifacts.contains_key(f))
        .collect())
}
