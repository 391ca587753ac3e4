//! Steering plans: layer weights, time schedules, the Bernoulli gate, and
//! multi-direction composition.
//!
//! The coefficient applied to layer `ℓ` at step `t` is
//! `η_ℓ(t) = η₀ · w_ℓ · φ(t) · ψ_p(t)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::rfm::SteeringDirection;
use crate::rng::unit_at;

/// Min–max normalization onto `[0, 1]`; constant input maps to all ones.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("layer scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("layer scores"));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightKind {
    Uniform,
    Linear,
    /// `w₀ · ŝ^{1/κ}`, `κ ∈ (0, 1]`.
    Exponential { kappa: f64 },
    /// `w₀` on the `k` best-scoring layers, zero elsewhere.
    TopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightScheme {
    pub kind: WeightKind,
    /// `w₀`.
    pub base: f64,
    /// Raw per-layer probe scores `s_ℓ`.
    pub scores: Vec<f64>,
}

impl LayerWeightScheme {
    pub fn new(kind: WeightKind, base: f64, scores: Vec<f64>) -> Self {
        Self { kind, base, scores }
    }

    pub fn uniform(base: f64, layers: usize) -> Self {
        Self::new(WeightKind::Uniform, base, vec![1.0; layers])
    }
}

pub fn layer_weights(scheme: &LayerWeightScheme) -> Result<Vec<f64>> {
    if !(scheme.base.is_finite() && scheme.base >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "base weight must be non-negative, got {}",
            scheme.base
        )));
    }
    let s_hat = normalize_scores(&scheme.scores)?;
    let w0 = scheme.base;
    let weights = match scheme.kind {
        WeightKind::Uniform => vec![w0; s_hat.len()],
        WeightKind::Linear => s_hat.iter().map(|s| w0 * s).collect(),
        WeightKind::Exponential { kappa } => {
            if !(kappa > 0.0 && kappa <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "kappa must lie in (0, 1], got {kappa}"
                )));
            }
            s_hat.iter().map(|s| w0 * s.powf(1.0 / kappa)).collect()
        }
        WeightKind::TopK { k } => {
            if k < 1 {
                return Err(Error::InvalidParameter("top-K needs K >= 1".into()));
            }
            let mut order: Vec<usize> = (0..s_hat.len()).collect();
            // stable sort keeps the lower layer first among ties
            order.sort_by(|&a, &b| s_hat[b].total_cmp(&s_hat[a]));
            let mut w = vec![0.0; s_hat.len()];
            for &l in order.iter().take(k) {
                w[l] = w0;
            }
            w
        }
    };
    Ok(weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    LinearRise,
    LinearDecay,
    ExpDecay,
    LogisticRise,
    Sine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 6] = [
        ScheduleKind::Constant,
        ScheduleKind::LinearRise,
        ScheduleKind::LinearDecay,
        ScheduleKind::ExpDecay,
        ScheduleKind::LogisticRise,
        ScheduleKind::Sine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::LinearRise => "linear-rise",
            ScheduleKind::LinearDecay => "linear-decay",
            ScheduleKind::ExpDecay => "exp-decay",
            ScheduleKind::LogisticRise => "logistic-rise",
            ScheduleKind::Sine => "sine",
        }
    }
}

pub const DEFAULT_HORIZON: f64 = 1500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Window of the linear forms, in steps.
    pub horizon: f64,
    /// Base `λ` of the exponential decay.
    pub decay: f64,
    pub midpoint: f64,
    pub scale: f64,
    pub period: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(ScheduleKind::Constant)
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            horizon: DEFAULT_HORIZON,
            decay: 0.998,
            midpoint: 750.0,
            scale: 200.0,
            period: 1500.0,
        }
    }

    pub fn constant() -> Self {
        Self::new(ScheduleKind::Constant)
    }

    pub fn linear(kind: ScheduleKind, window: f64) -> Self {
        Self {
            horizon: window,
            ..Self::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.horizon) || !positive(self.scale) || !positive(self.period) {
            return Err(Error::InvalidParameter(
                "schedule horizon, scale and period must be positive".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "decay base must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if !self.midpoint.is_finite() {
            return Err(Error::NonFinite("schedule midpoint"));
        }
        Ok(())
    }

    /// `φ(t) ∈ [0, 1]`.
    pub fn eval(&self, t: usize) -> f64 {
        let t = t as f64;
        let rise = (t / self.horizon).clamp(0.0, 1.0);
        let phi = match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::LinearRise => rise,
            ScheduleKind::LinearDecay => 1.0 - rise,
            ScheduleKind::ExpDecay => self.decay.powf(t),
            ScheduleKind::LogisticRise => 1.0 / (1.0 + (-(t - self.midpoint) / self.scale).exp()),
            ScheduleKind::Sine => {
                0.5 * (1.0 + (2.0 * std::f64::consts::PI * t / self.period).sin())
            }
        };
        phi.clamp(0.0, 1.0)
    }
}

/// One steered concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub label: String,
    /// At most one direction per layer.
    pub directions: Vec<SteeringDirection>,
    /// `η₀`; negative values steer away from the concept.
    pub eta0: f64,
    pub schedule: Schedule,
    pub scheme: LayerWeightScheme,
    /// Resolved `w_ℓ`, one per model layer.
    pub weights: Vec<f64>,
}

impl PlanEntry {
    pub fn new(
        label: impl Into<String>,
        directions: Vec<SteeringDirection>,
        eta0: f64,
        schedule: Schedule,
        scheme: LayerWeightScheme,
    ) -> Result<Self> {
        if !eta0.is_finite() {
            return Err(Error::NonFinite("control coefficient"));
        }
        schedule.validate()?;
        let weights = layer_weights(&scheme)?;
        let mut seen = vec![false; weights.len()];
        for d in &directions {
            if d.layer >= weights.len() {
                return Err(Error::InvalidParameter(format!(
                    "direction for layer {} but only {} layer weights",
                    d.layer,
                    weights.len()
                )));
            }
            if std::mem::replace(&mut seen[d.layer], true) {
                return Err(Error::InvalidParameter(format!(
                    "two directions for layer {}",
                    d.layer
                )));
            }
            if (d.vector.norm() - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "direction for layer {} is not unit norm",
                    d.layer
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            directions,
            eta0,
            schedule,
            scheme,
            weights,
        })
    }

    pub fn direction(&self, layer: usize) -> Option<&DVector<f64>> {
        self.directions.iter().find(|d| d.layer == layer).map(|d| &d.vector)
    }
}

/// `η₀ · w_ℓ · φ(t) · gate`.
pub fn effective_coefficient(entry: &PlanEntry, layer: usize, t: usize, gate_open: bool) -> f64 {
    if !gate_open {
        return 0.0;
    }
    let w = entry.weights.get(layer).copied().unwrap_or(0.0);
    entry.eta0 * w * entry.schedule.eval(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub entries: Vec<PlanEntry>,
    /// `p` of the per-step Bernoulli gate.
    pub gate_probability: f64,
    pub seed: u64,
}

impl SteeringPlan {
    pub fn new(entries: Vec<PlanEntry>, gate_probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gate_probability) {
            return Err(Error::InvalidParameter(format!(
                "gate probability must lie in [0, 1], got {gate_probability}"
            )));
        }
        Ok(Self {
            entries,
            gate_probability,
            seed,
        })
    }

    /// `ψ_p(t)`: one draw per step, shared by every layer and entry. The
    /// stream is a pure function of `(seed, t)` and is nested in `p`: a gate
    /// open at `p` stays open at any larger `p`.
    pub fn gate_open(&self, t: usize) -> bool {
        unit_at(self.seed, t as u64) < self.gate_probability
    }

    /// Checks every direction against the model's layer count and width.
    pub fn validate_for(&self, layers: usize, hidden: usize) -> Result<()> {
        for e in &self.entries {
            ensure_dims(layers, e.weights.len())?;
            for d in &e.directions {
                if d.layer >= layers {
                    return Err(Error::InvalidParameter(format!(
                        "plan steers layer {} of a {layers}-layer model",
                        d.layer
                    )));
                }
                ensure_dims(hidden, d.vector.len())?;
            }
        }
        Ok(())
    }

    /// Per-entry `η_ℓ(t)` at one step.
    pub fn coefficients_at(&self, layer: usize, t: usize) -> Vec<f64> {
        let open = self.gate_open(t);
        self.entries
            .iter()
            .map(|e| effective_coefficient(e, layer, t, open))
            .collect()
    }
}

/// `h' = h + Σ_m η_m q_m`. Zero coefficients are skipped so a zero plan
/// leaves `h` bit-identical.
pub fn apply_steering(h: &mut DVector<f64>, contributions: &[(f64, &DVector<f64>)]) -> Result<()> {
    for (eta, q) in contributions {
        ensure_dims(h.len(), q.len())?;
        if *eta != 0.0 {
            h.axpy(*eta, q, 1.0);
        }
    }
    Ok(())
}

/// Entry A decays linearly from `η₀` to 0 over `window` steps while entry B
/// rises from 0 to `η₀`.
#[allow(clippy::too_many_arguments)]
pub fn build_crossfade_plan(
    label_a: &str,
    dirs_a: Vec<SteeringDirection>,
    label_b: &str,
    dirs_b: Vec<SteeringDirection>,
    eta0: f64,
    window: f64,
    scheme: LayerWeightScheme,
    gate_probability: f64,
    seed: u64,
) -> Result<SteeringPlan> {
    if !(window.is_finite() && window > 0.0) {
        return Err(Error::InvalidParameter(format!("crossfade window must be positive, got {window}")));
    }
    let a = PlanEntry::new(
        label_a,
        dirs_a,
        eta0,
        Schedule::linear(ScheduleKind::LinearDecay, window),
        scheme.clone(),
    )?;
    let b = PlanEntry::new(
        label_b,
        dirs_b,
        eta0,
        Schedule::linear(ScheduleKind::LinearRise, window),
        scheme,
    )?;
    SteeringPlan::new(vec![a, b], gate_probability, seed)
}
