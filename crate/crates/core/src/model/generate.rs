use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FrozenModel;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::steering::{effective_coefficient, SteeringPlan};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Layers whose per-step streams are kept.
    pub layers: Vec<usize>,
}

impl RecordOptions {
    pub fn layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layers: layers.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    /// Sampled tokens, one per step; the prompt is not included.
    pub tokens: Vec<usize>,
    /// Per plan entry, the `steps × L` coefficients actually applied.
    pub coefficients: Vec<DMatrix<f64>>,
    pub gates: Vec<bool>,
    /// `steps × d` post-injection streams of each recorded layer. Row `t` is
    /// the state from which token `t` was sampled.
    pub states: BTreeMap<usize, DMatrix<f64>>,
}

fn sample(logits: &DVector<f64>, u: f64) -> usize {
    let max = logits.max();
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

/// Temperature-1 sampling of `steps` tokens after `prompt`. Step `t` feeds
/// the previous token (the last prompt token at `t = 0`) with the plan's
/// step-`t` coefficients, then samples token `t`. Earlier prompt tokens are
/// never steered.
pub fn generate(
    model: &FrozenModel,
    prompt: &[usize],
    steps: usize,
    seed: u64,
    plan: Option<&SteeringPlan>,
    record: &RecordOptions,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    model.check_tokens(prompt)?;
    let (layers, d) = (model.layers(), model.hidden());
    if let Some(&l) = record.layers.iter().find(|&&l| l >= layers) {
        return Err(Error::InvalidParameter(format!(
            "cannot record layer {l} of a {layers}-layer model"
        )));
    }
    if let Some(p) = plan {
        p.validate_for(layers, d)?;
    }
    // per entry, per layer
    let directions: Vec<Vec<Option<&DVector<f64>>>> = plan
        .map(|p| {
            p.entries
                .iter()
                .map(|e| (0..layers).map(|l| e.direction(l)).collect())
                .collect()
        })
        .unwrap_or_default();
    let entries = directions.len();

    let mut rng = rng_for(seed, 0);
    let mut state = model.start_state();
    let (&first, context) = prompt.split_last().expect("non-empty prompt");
    for &tok in context {
        model.step(&mut state, tok, |_, _| {}, |_, _| {});
    }

    let mut tokens = Vec::with_capacity(steps);
    let mut coefficients = vec![DMatrix::zeros(steps, layers); entries];
    let mut gates = Vec::with_capacity(steps);
    let mut states: BTreeMap<usize, DMatrix<f64>> = record
        .layers
        .iter()
        .map(|&l| (l, DMatrix::zeros(steps, d)))
        .collect();

    for t in 0..steps {
        let input = if t == 0 { first } else { tokens[t - 1] };
        let open = plan.is_some_and(|p| p.gate_open(t));
        gates.push(open);
        let coef: Vec<Vec<f64>> = match plan {
            Some(p) => p
                .entries
                .iter()
                .zip(&directions)
                .map(|(e, dirs)| {
                    (0..layers)
                        .map(|l| match dirs[l] {
                            Some(_) => effective_coefficient(e, l, t, open),
                            None => 0.0,
                        })
                        .collect()
                })
                .collect(),
            None => Vec::new(),
        };
        let last = model.step(
            &mut state,
            input,
            |l, h| {
                for (m, dirs) in directions.iter().enumerate() {
                    if let Some(q) = dirs[l] {
                        let eta = coef[m][l];
                        if eta != 0.0 {
                            h.axpy(eta, q, 1.0);
                        }
                    }
                }
            },
            |l, h| {
                if let Some(s) = states.get_mut(&l) {
                    s.set_row(t, &h.transpose());
                }
            },
        );
        for (m, c) in coef.iter().enumerate() {
            coefficients[m].set_row(t, &DVector::from_column_slice(c).transpose());
        }
        let u: f64 = rng.random();
        tokens.push(sample(&model.logits(&last), u));
    }

    Ok(GenerationTrace {
        tokens,
        coefficients,
        gates,
        states,
    })
}
