//! Synthetic labeled token sequences.
//!
//! File format (UTF-8, tab separated):
//!
//! ```text
//! # rfmsteer-dataset 1
//! # spec {"name":"notes","kind":{...},"seq_len":64,"noise":0.0}
//! # vocab 32
//! index	label	target	tokens
//! 0	0	0	3 1 2 0 ...
//! ```
//!
//! `label` is the class index; `target` is the value the probe is trained on
//! (the class for classification, the period for the period concept).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfm::Targets;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", deny_unknown_fields)]
pub enum ConceptKind {
    /// Class `c` draws at least `purity · T` tokens from bucket `c` of the
    /// vocabulary.
    Dominance { classes: usize, purity: f64 },
    /// Positives contain the bigram `(first, second)` at least `min_count`
    /// times; negatives never contain it.
    Motif {
        first: usize,
        second: usize,
        min_count: usize,
    },
    /// A random block of length `P ∈ [min, max]` repeated to fill `T`, with
    /// each token replaced at rate `noise`. Regression target `P`.
    Period { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub kind: ConceptKind,
    pub seq_len: usize,
    #[serde(default)]
    pub noise: f64,
}

impl ConceptSpec {
    pub fn classes(&self) -> usize {
        match self.kind {
            ConceptKind::Dominance { classes, .. } => classes,
            ConceptKind::Motif { .. } => 2,
            ConceptKind::Period { min, max } => max.saturating_sub(min) + 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.kind, ConceptKind::Period { .. })
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.seq_len < 8 {
            return Err(Error::InvalidParameter(format!(
                "concept {}: sequence length must be at least 8, got {}",
                self.name, self.seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidParameter(format!(
                "concept {}: noise must lie in [0, 1]",
                self.name
            )));
        }
        match self.kind {
            ConceptKind::Dominance { classes, purity } => {
                if classes < 2 {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: needs at least 2 classes",
                        self.name
                    )));
                }
                if vocab < classes {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: vocabulary of {vocab} is too small for {classes} classes",
                        self.name
                    )));
                }
                if !(0.0..=1.0).contains(&purity) {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: purity must lie in [0, 1]",
                        self.name
                    )));
                }
            }
            ConceptKind::Motif {
                first,
                second,
                min_count,
            } => {
                if first >= vocab || second >= vocab || first == second {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: motif tokens must be distinct and inside the vocabulary",
                        self.name
                    )));
                }
                if min_count < 1 || 2 * min_count > self.seq_len {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: motif count must be in [1, T/2]",
                        self.name
                    )));
                }
            }
            ConceptKind::Period { min, max } => {
                if min < 1 || max < min + 1 || max > vocab || max > self.seq_len {
                    return Err(Error::InvalidParameter(format!(
                        "concept {}: period range must satisfy 1 <= min < max <= min(vocab, T)",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens of dominance bucket `c`.
    pub fn bucket(&self, vocab: usize, c: usize) -> std::ops::Range<usize> {
        match self.kind {
            ConceptKind::Dominance { classes, .. } => {
                let width = vocab / classes;
                c * width..(c + 1) * width
            }
            _ => 0..0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ConceptSpec,
    pub vocab: usize,
    pub sequences: Vec<Vec<usize>>,
    /// Class index per sequence; for the period concept `P - min`.
    pub labels: Vec<usize>,
}

fn uniform_token(rng: &mut impl Rng, vocab: usize) -> usize {
    rng.random_range(0..vocab)
}

impl Dataset {
    /// `n_per_class` sequences for every class, class-major.
    pub fn synthesize(spec: &ConceptSpec, vocab: usize, n_per_class: usize, seed: u64) -> Result<Self> {
        spec.validate(vocab)?;
        if n_per_class < 1 {
            return Err(Error::InvalidParameter("n_per_class must be at least 1".into()));
        }
        let t_len = spec.seq_len;
        let classes = spec.classes();
        let mut sequences = Vec::with_capacity(classes * n_per_class);
        let mut labels = Vec::with_capacity(classes * n_per_class);
        for c in 0..classes {
            for i in 0..n_per_class {
                let mut rng = rng_for(derive_seed(seed, c as u64), i as u64);
                let seq = match spec.kind {
                    ConceptKind::Dominance { purity, .. } => {
                        let bucket = spec.bucket(vocab, c);
                        let inside = (purity * t_len as f64).ceil() as usize;
                        let mut s: Vec<usize> = (0..t_len)
                            .map(|k| {
                                if k < inside {
                                    rng.random_range(bucket.clone())
                                } else {
                                    uniform_token(&mut rng, vocab)
                                }
                            })
                            .collect();
                        s.shuffle(&mut rng);
                        s
                    }
                    ConceptKind::Motif {
                        first,
                        second,
                        min_count,
                    } => motif_sequence(&mut rng, vocab, t_len, (first, second), min_count, c == 1),
                    ConceptKind::Period { min, .. } => {
                        let period = min + c;
                        let block: Vec<usize> = index::sample(&mut rng, vocab, period).into_vec();
                        (0..t_len)
                            .map(|k| {
                                if rng.random::<f64>() < spec.noise {
                                    uniform_token(&mut rng, vocab)
                                } else {
                                    block[k % period]
                                }
                            })
                            .collect()
                    }
                };
                sequences.push(seq);
                labels.push(c);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            vocab,
            sequences,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Value the probe is trained on.
    pub fn target(&self, i: usize) -> f64 {
        match self.spec.kind {
            ConceptKind::Period { min, .. } => (min + self.labels[i]) as f64,
            _ => self.labels[i] as f64,
        }
    }

    pub fn targets(&self) -> Targets {
        match self.spec.kind {
            ConceptKind::Dominance { classes, .. } => Targets::Multiclass {
                labels: self.labels.clone(),
                classes,
            },
            ConceptKind::Motif { .. } => Targets::Binary(self.labels.iter().map(|&l| l == 1).collect()),
            ConceptKind::Period { .. } => {
                Targets::Regression((0..self.len()).map(|i| self.target(i)).collect())
            }
        }
    }

    /// One-vs-rest labels for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> Targets {
        Targets::Binary(self.labels.iter().map(|&l| l == c).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "# rfmsteer-dataset 1").ok();
        writeln!(out, "# spec {}", serde_json::to_string(&self.spec)?).ok();
        writeln!(out, "# vocab {}", self.vocab).ok();
        writeln!(out, "index\tlabel\ttarget\ttokens").ok();
        for (i, seq) in self.sequences.iter().enumerate() {
            let toks: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            writeln!(out, "{i}\t{}\t{}\t{}", self.labels[i], self.target(i), toks.join(" ")).ok();
        }
        Ok(out)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Format(format!("line {line}: {what}"));
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Format(format!("missing {what}")));
        let (_, magic) = next("header")?;
        if magic.trim() != "# rfmsteer-dataset 1" {
            return Err(bad(1, "not a dataset file"));
        }
        let (_, spec_line) = next("spec")?;
        let spec: ConceptSpec = serde_json::from_str(
            spec_line.strip_prefix("# spec ").ok_or_else(|| bad(2, "expected spec"))?,
        )?;
        let (_, vocab_line) = next("vocab")?;
        let vocab: usize = vocab_line
            .strip_prefix("# vocab ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(3, "expected vocab"))?;
        let (_, columns) = next("column header")?;
        if columns.trim_end() != "index\tlabel\ttarget\ttokens" {
            return Err(bad(4, "unexpected columns"));
        }
        spec.validate(vocab)?;
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(n + 1, "expected 4 fields"));
            }
            let label: usize = fields[1].parse().map_err(|_| bad(n + 1, "bad label"))?;
            if label >= spec.classes() {
                return Err(bad(n + 1, "label out of range"));
            }
            let seq: Vec<usize> = fields[3]
                .split(' ')
                .map(|t| t.parse::<usize>().ok().filter(|&t| t < vocab))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(n + 1, "bad token"))?;
            labels.push(label);
            sequences.push(seq);
        }
        Ok(Self {
            spec,
            vocab,
            sequences,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// Number of `(a, b)` adjacencies in `s`.
pub fn count_bigram(s: &[usize], (a, b): (usize, usize)) -> usize {
    s.windows(2).filter(|w| w[0] == a && w[1] == b).count()
}

fn motif_sequence(
    rng: &mut impl Rng,
    vocab: usize,
    t_len: usize,
    (a, b): (usize, usize),
    min_count: usize,
    positive: bool,
) -> Vec<usize> {
    let mut s: Vec<usize> = (0..t_len).map(|_| uniform_token(rng, vocab)).collect();
    if positive {
        // one bigram inside each of `min_count` equal segments
        let seg = t_len / min_count;
        for k in 0..min_count {
            let at = k * seg + rng.random_range(0..seg - 1);
            s[at] = a;
            s[at + 1] = b;
        }
    } else {
        for i in 1..t_len {
            while s[i - 1] == a && s[i] == b {
                s[i] = uniform_token(rng, vocab);
            }
        }
    }
    s
}
