//! Experiment configuration, read from a single TOML file.
//!
//! Every section is optional; an empty file gives the default experiment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rfmsteer::steering::Schedule;
use rfmsteer::{ConceptKind, ConceptSpec, ModelConfig, Pooling, ScheduleKind, WeightKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub model: ModelConfig,
    pub concepts: Vec<ConceptConfig>,
    pub probe: ProbeConfig,
    pub steering: SteeringConfig,
    pub ablation: AblationConfig,
    pub trace: TraceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
            model: ModelConfig::default(),
            concepts: vec![
                ConceptConfig {
                    name: "notes".into(),
                    kind: ConceptKind::Dominance {
                        classes: 8,
                        purity: 0.8,
                    },
                    seq_len: 64,
                    noise: 0.0,
                    n_per_class: 400,
                },
                ConceptConfig {
                    name: "chords".into(),
                    kind: ConceptKind::Motif {
                        first: 3,
                        second: 17,
                        min_count: 4,
                    },
                    seq_len: 64,
                    noise: 0.0,
                    n_per_class: 400,
                },
                ConceptConfig {
                    name: "tempo".into(),
                    kind: ConceptKind::Period { min: 2, max: 16 },
                    seq_len: 64,
                    noise: 0.1,
                    n_per_class: 40,
                },
            ],
            probe: ProbeConfig::default(),
            steering: SteeringConfig::default(),
            ablation: AblationConfig::default(),
            trace: TraceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptConfig {
    pub name: String,
    pub kind: ConceptKind,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
}

fn default_seq_len() -> usize {
    64
}

fn default_n_per_class() -> usize {
    400
}

impl ConceptConfig {
    pub fn spec(&self) -> ConceptSpec {
        ConceptSpec {
            name: self.name.clone(),
            kind: self.kind,
            seq_len: self.seq_len,
            noise: self.noise,
        }
    }

    pub fn classes(&self) -> usize {
        self.spec().classes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub exponent: f64,
    pub pooling: Pooling,
    /// Random-search draws per layer probe.
    pub search_draws: usize,
    /// At most this many sequences per class are used for probe training.
    pub samples_per_class: usize,
    /// Layer whose probe scores generations; defaults to the last layer.
    pub eval_layer: Option<usize>,
    pub aggregation: bool,
    pub aggregation_draws: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            exponent: 0.5,
            pooling: Pooling::Mean,
            search_draws: 4,
            samples_per_class: 100,
            eval_layer: None,
            aggregation: false,
            aggregation_draws: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    /// Concept steered by the grid.
    pub concept: String,
    /// Target class of a dominance concept.
    pub class: usize,
    pub eta0: Vec<f64>,
    pub schedules: Vec<ScheduleKind>,
    pub weightings: Vec<WeightKind>,
    pub gate_probability: f64,
    pub base_weight: f64,
    pub generations: usize,
    pub steps: usize,
    /// Emit an `η₀ = 0` row that runs through the steering machinery.
    pub control: bool,
    pub pairwise: PairwiseConfig,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            concept: "notes".into(),
            class: 0,
            eta0: vec![0.15, 0.30, 0.45, 0.60],
            schedules: vec![ScheduleKind::Constant],
            weightings: vec![WeightKind::Exponential { kappa: 0.95 }],
            gate_probability: 0.3,
            base_weight: 1.0,
            generations: 50,
            steps: 64,
            control: true,
            pairwise: PairwiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseConfig {
    pub enabled: bool,
    pub pairs: Vec<[String; 2]>,
    pub combos: Vec<[f64; 2]>,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        let pair = |a: &str, b: &str| [a.to_string(), b.to_string()];
        Self {
            enabled: true,
            pairs: vec![
                pair("notes", "chords"),
                pair("notes", "tempo"),
                pair("chords", "tempo"),
            ],
            combos: vec![[0.3, 0.3], [0.3, 0.6], [0.6, 0.3], [0.6, 0.6]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub eta0: f64,
    pub p_values: Vec<f64>,
    /// Top-K sizes; the model's layer count is always appended.
    pub k_values: Vec<usize>,
    pub kappa_values: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            eta0: 0.45,
            p_values: vec![0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0],
            k_values: vec![4, 6, 8, 10],
            kappa_values: vec![0.25, 0.5, 0.75, 0.95, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub schedules: Vec<ScheduleKind>,
    pub eta0: f64,
    pub steps: usize,
    pub generations: usize,
    /// Trailing pooling window; 0 pools the whole prefix.
    pub window: usize,
    pub smoothing: usize,
    pub gate_probability: f64,
    pub weighting: WeightKind,
    pub crossfade: CrossfadeConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            schedules: vec![
                ScheduleKind::LinearRise,
                ScheduleKind::LinearDecay,
                ScheduleKind::ExpDecay,
                ScheduleKind::LogisticRise,
                ScheduleKind::Sine,
            ],
            eta0: 0.45,
            steps: 1500,
            generations: 100,
            window: 64,
            smoothing: 50,
            gate_probability: 0.3,
            weighting: WeightKind::Exponential { kappa: 0.95 },
            crossfade: CrossfadeConfig::default(),
        }
    }
}

impl TraceConfig {
    pub fn pooling_window(&self) -> Option<usize> {
        (self.window > 0).then_some(self.window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossfadeConfig {
    pub from: usize,
    pub to: usize,
    pub eta0: f64,
    pub window: f64,
}

impl Default for CrossfadeConfig {
    fn default() -> Self {
        Self {
            from: 0,
            to: 1,
            eta0: 0.45,
            window: 1500.0,
        }
    }
}

/// Finds the line of a dotted key path in TOML text. Handles `[table]`,
/// `[[array]]` headers (with `name[i]` selecting the i-th one) and
/// `key = value` lines, including keys inside single-line inline tables.
/// Falls back to the nearest ancestor that can be found.
pub fn locate_key(text: &str, path: &str) -> Option<usize> {
    let parts: Vec<(String, Option<usize>)> = path
        .split('.')
        .map(|p| match p.find('[') {
            Some(i) => (p[..i].to_string(), p[i + 1..p.len() - 1].parse().ok()),
            None => (p.to_string(), None),
        })
        .collect();
    let lines: Vec<&str> = text.lines().collect();
    let headers: Vec<(usize, Vec<String>)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.trim();
            let inner = l.strip_prefix("[[").and_then(|s| s.split("]]").next()).or_else(|| {
                l.strip_prefix('[').and_then(|s| s.split(']').next())
            })?;
            Some((i, inner.split('.').map(|s| s.trim().to_string()).collect()))
        })
        .collect();

    // Deepest header that is a prefix of the path.
    let mut best: Option<(usize, usize, usize)> = None; // (depth, start, end)
    for depth in (1..=parts.len()).rev() {
        let names: Vec<&str> = parts[..depth].iter().map(|p| p.0.as_str()).collect();
        let matching: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, (_, h))| h.iter().map(String::as_str).eq(names.iter().copied()))
            .map(|(k, _)| k)
            .collect();
        let pick = match parts[depth - 1].1 {
            Some(i) => matching.get(i).copied(),
            None => matching.first().copied(),
        };
        if let Some(k) = pick {
            let start = headers[k].0;
            let end = headers.get(k + 1).map_or(lines.len(), |h| h.0);
            best = Some((depth, start, end));
            break;
        }
    }
    let (depth, start, end) = best.unwrap_or((0, 0, headers.first().map_or(lines.len(), |h| h.0)));
    let rest: Vec<&str> = parts[depth..].iter().map(|p| p.0.as_str()).collect();
    if rest.is_empty() {
        return Some(start + 1);
    }
    let scan_from = if depth == 0 { 0 } else { start + 1 };
    let key_line = |key: &str, from: usize, to: usize| {
        (from..to).find(|&i| {
            let l = lines[i].trim_start();
            l.strip_prefix(key)
                .is_some_and(|r| r.trim_start().starts_with('='))
                || l.strip_prefix(&format!("\"{key}\""))
                    .is_some_and(|r| r.trim_start().starts_with('='))
        })
    };
    let Some(first) = key_line(rest[0], scan_from, end) else {
        return (depth > 0).then_some(start + 1);
    };
    // Deeper keys can only live in an inline table on the same line.
    Some(first + 1)
}

/// Key of the `key = value` assignment on a (0-based) line, qualified by the
/// enclosing table header.
fn key_at_line(text: &str, line: usize) -> Option<String> {
    let lines: Vec<&str> = text.lines().collect();
    let own = lines.get(line)?.split('=').next()?.trim();
    if own.is_empty() || own.starts_with('[') || own.starts_with('#') {
        return None;
    }
    let header = lines[..line].iter().rev().find_map(|l| {
        let l = l.trim();
        l.strip_prefix("[[")
            .and_then(|s| s.split("]]").next())
            .or_else(|| l.strip_prefix('[').and_then(|s| s.split(']').next()))
    });
    Some(match header {
        Some(h) => format!("{}.{own}", h.trim()),
        None => own.to_string(),
    })
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count()
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key and its line.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            let message = e.message().to_string();
            let key = unknown_field(&message)
                .or_else(|| line.and_then(|l| key_at_line(text, l)))
                .unwrap_or_else(|| "<document>".into());
            CliError::config(key, line.map(|l| l + 1), message)
        })?;
        config.validate().map_err(|(key, message)| {
            let line = locate_key(text, &key);
            CliError::config(key, line, message)
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.display().to_string(),
            source,
        })?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn concept(&self, name: &str) -> Option<(usize, &ConceptConfig)> {
        self.concepts.iter().enumerate().find(|(_, c)| c.name == name)
    }

    pub fn eval_layer(&self) -> usize {
        self.probe.eval_layer.unwrap_or(self.model.layers.saturating_sub(1))
    }

    /// Configured `K` values that fit the model, plus `L`, ascending.
    pub fn k_sweep(&self) -> Vec<usize> {
        let l = self.model.layers;
        let mut ks: Vec<usize> = self.ablation.k_values.iter().copied().filter(|&k| k < l).collect();
        ks.push(l);
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// First failing check as `(key path, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let fail = |key: &str, msg: String| Err((key.to_string(), msg));
        let m = &self.model;
        if m.layers < 1 {
            return fail("model.layers", "must be at least 1".into());
        }
        if m.hidden < 8 {
            return fail("model.hidden", format!("must be at least 8, got {}", m.hidden));
        }
        if m.vocab < 4 {
            return fail("model.vocab", format!("must be at least 4, got {}", m.vocab));
        }
        for (key, v) in [
            ("model.embed_scale", m.embed_scale),
            ("model.block_scale", m.block_scale),
            ("model.logit_gain", m.logit_gain),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(key, format!("must be positive, got {v}"));
            }
        }
        for (key, v) in [("model.context_weight", m.context_weight), ("model.lag_weight", m.lag_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(key, format!("must be non-negative, got {v}"));
            }
        }

        if self.concepts.is_empty() {
            return fail("concepts", "at least one concept is required".into());
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let key = |k: &str| format!("concepts[{i}].{k}");
            if c.name.is_empty()
                || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-')
            {
                return fail(&key("name"), format!("`{}` must be non-empty and use [A-Za-z0-9_-]", c.name));
            }
            if !names.insert(c.name.as_str()) {
                return fail(&key("name"), format!("duplicate concept name `{}`", c.name));
            }
            if c.seq_len < 8 {
                return fail(&key("seq_len"), format!("must be at least 8, got {}", c.seq_len));
            }
            if !(0.0..=1.0).contains(&c.noise) {
                return fail(&key("noise"), format!("must lie in [0, 1], got {}", c.noise));
            }
            if c.n_per_class < 1 {
                return fail(&key("n_per_class"), "must be at least 1".into());
            }
            match c.kind {
                ConceptKind::Dominance { classes, purity } => {
                    if classes < 2 || classes > m.vocab {
                        return fail(
                            &key("kind.classes"),
                            format!("must lie in [2, vocab = {}], got {classes}", m.vocab),
                        );
                    }
                    if !(0.0..=1.0).contains(&purity) {
                        return fail(&key("kind.purity"), format!("must lie in [0, 1], got {purity}"));
                    }
                }
                ConceptKind::Motif {
                    first,
                    second,
                    min_count,
                } => {
                    if first >= m.vocab {
                        return fail(&key("kind.first"), format!("token {first} is outside the vocabulary"));
                    }
                    if second >= m.vocab || second == first {
                        return fail(
                            &key("kind.second"),
                            format!("token {second} must be inside the vocabulary and differ from `first`"),
                        );
                    }
                    if min_count < 1 || 2 * min_count > c.seq_len {
                        return fail(&key("kind.min_count"), format!("must lie in [1, seq_len / 2], got {min_count}"));
                    }
                }
                ConceptKind::Period { min, max } => {
                    if min < 1 {
                        return fail(&key("kind.min"), "must be at least 1".into());
                    }
                    if max <= min || max > m.vocab || max > c.seq_len {
                        return fail(
                            &key("kind.max"),
                            format!("must exceed `min` and fit in both vocab and seq_len, got {max}"),
                        );
                    }
                }
            }
        }

        let p = &self.probe;
        if p.iterations > 100 {
            return fail("probe.iterations", format!("must be at most 100, got {}", p.iterations));
        }
        if !(p.exponent.is_finite() && p.exponent > 0.0) {
            return fail("probe.exponent", format!("must be positive, got {}", p.exponent));
        }
        if p.search_draws < 1 {
            return fail("probe.search_draws", "must be at least 1".into());
        }
        if p.samples_per_class < 4 {
            return fail("probe.samples_per_class", "must be at least 4".into());
        }
        if let Some(l) = p.eval_layer {
            if l >= m.layers {
                return fail("probe.eval_layer", format!("layer {l} does not exist in a {}-layer model", m.layers));
            }
        }
        if p.aggregation_draws < 1 {
            return fail("probe.aggregation_draws", "must be at least 1".into());
        }

        let s = &self.steering;
        let Some((_, target)) = self.concept(&s.concept) else {
            return fail("steering.concept", format!("unknown concept `{}`", s.concept));
        };
        if !target.spec().is_regression() && s.class >= target.classes() {
            return fail("steering.class", format!("class {} out of range for `{}`", s.class, s.concept));
        }
        if s.eta0.is_empty() {
            return fail("steering.eta0", "needs at least one value".into());
        }
        if let Some(v) = s.eta0.iter().find(|v| !v.is_finite()) {
            return fail("steering.eta0", format!("non-finite value {v}"));
        }
        if s.schedules.is_empty() {
            return fail("steering.schedules", "needs at least one schedule".into());
        }
        if s.weightings.is_empty() {
            return fail("steering.weightings", "needs at least one weighting".into());
        }
        for w in &s.weightings {
            check_weighting(w).or_else(|msg| fail("steering.weightings", msg))?;
        }
        if !(0.0..=1.0).contains(&s.gate_probability) {
            return fail("steering.gate_probability", format!("must lie in [0, 1], got {}", s.gate_probability));
        }
        if !(s.base_weight.is_finite() && s.base_weight >= 0.0) {
            return fail("steering.base_weight", format!("must be non-negative, got {}", s.base_weight));
        }
        if s.generations < 2 {
            return fail("steering.generations", "at least 2 generations are needed for FD and MMD".into());
        }
        if s.steps < 1 {
            return fail("steering.steps", "must be at least 1".into());
        }
        if s.pairwise.enabled {
            for pair in &s.pairwise.pairs {
                for name in pair {
                    if self.concept(name).is_none() {
                        return fail("steering.pairwise.pairs", format!("unknown concept `{name}`"));
                    }
                }
                if pair[0] == pair[1] {
                    return fail("steering.pairwise.pairs", format!("pair repeats `{}`", pair[0]));
                }
            }
            if let Some(v) = s.pairwise.combos.iter().flatten().find(|v| !v.is_finite()) {
                return fail("steering.pairwise.combos", format!("non-finite value {v}"));
            }
        }

        let a = &self.ablation;
        if !a.eta0.is_finite() {
            return fail("ablation.eta0", "must be finite".into());
        }
        if let Some(v) = a.p_values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return fail("ablation.p_values", format!("{v} is not in [0, 1]"));
        }
        if a.k_values.contains(&0) {
            return fail("ablation.k_values", "K must be at least 1".into());
        }
        if let Some(v) = a.kappa_values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return fail("ablation.kappa_values", format!("{v} is not in (0, 1]"));
        }

        let t = &self.trace;
        if !matches!(target.kind, ConceptKind::Dominance { .. }) && (!t.schedules.is_empty()) {
            return fail("steering.concept", "traces need a dominance (multiclass) concept".into());
        }
        if t.steps < 1 {
            return fail("trace.steps", "must be at least 1".into());
        }
        if t.generations < 1 {
            return fail("trace.generations", "must be at least 1".into());
        }
        if !t.eta0.is_finite() {
            return fail("trace.eta0", "must be finite".into());
        }
        if !(0.0..=1.0).contains(&t.gate_probability) {
            return fail("trace.gate_probability", format!("must lie in [0, 1], got {}", t.gate_probability));
        }
        check_weighting(&t.weighting).or_else(|msg| fail("trace.weighting", msg))?;
        for kind in &t.schedules {
            Schedule::new(*kind)
                .validate()
                .map_err(|e| ("trace.schedules".to_string(), e.to_string()))?;
        }
        let cf = &t.crossfade;
        let classes = target.classes();
        if cf.from >= classes {
            return fail("trace.crossfade.from", format!("class {} out of range", cf.from));
        }
        if cf.to >= classes || cf.to == cf.from {
            return fail("trace.crossfade.to", format!("class {} must be in range and differ from `from`", cf.to));
        }
        if !cf.eta0.is_finite() {
            return fail("trace.crossfade.eta0", "must be finite".into());
        }
        if !(cf.window.is_finite() && cf.window > 0.0) {
            return fail("trace.crossfade.window", format!("must be positive, got {}", cf.window));
        }
        Ok(())
    }
}

fn check_weighting(w: &WeightKind) -> Result<(), String> {
    match *w {
        WeightKind::Exponential { kappa } if !(kappa > 0.0 && kappa <= 1.0) => {
            Err(format!("kappa must lie in (0, 1], got {kappa}"))
        }
        WeightKind::TopK { k } if k < 1 => Err("top-k needs k >= 1".into()),
        _ => Ok(()),
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}
