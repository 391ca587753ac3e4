//! Seeded random search over probe hyperparameters.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{rfm_train, ConceptProbe, RfmConfig, Targets};
use super::scoring::Split;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `K_{2,q}`: Euclidean norm, tuned outer exponent.
    Euclidean,
    /// `K_{p,q}` with `p ~ U[q, 2]`.
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSearchSpace {
    /// Log-uniform.
    pub bandwidth: (f64, f64),
    /// Uniform.
    pub q: (f64, f64),
    /// Log-uniform.
    pub ridge: (f64, f64),
    /// Draw `centered` from `{false, true}`; otherwise always uncentered.
    pub search_centering: bool,
    pub family: KernelFamily,
    pub draws: usize,
}

impl HyperSearchSpace {
    pub fn layerwise() -> Self {
        Self {
            bandwidth: (1.0, 100.0),
            q: (0.7, 1.4),
            ridge: (1e-5, 10.0),
            search_centering: true,
            family: KernelFamily::Euclidean,
            draws: 100,
        }
    }

    pub fn aggregation() -> Self {
        Self {
            family: KernelFamily::General,
            draws: 300,
            ..Self::layerwise()
        }
    }

    pub fn with_draws(mut self, draws: usize) -> Self {
        self.draws = draws;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64), positive: bool| {
            lo.is_finite() && hi.is_finite() && lo <= hi && (!positive || lo > 0.0)
        };
        if self.draws == 0 {
            return Err(Error::InvalidParameter("search needs at least one draw".into()));
        }
        if !ok(self.bandwidth, true) || !ok(self.ridge, true) {
            return Err(Error::InvalidParameter(
                "bandwidth and ridge ranges must be positive and ordered".into(),
            ));
        }
        if !ok(self.q, true) || self.q.1 > 2.0 {
            return Err(Error::InvalidParameter("q range must lie in (0, 2]".into()));
        }
        Ok(())
    }

    /// Draw for trial `index`; a pure function of `(seed, index)`.
    pub fn sample(&self, seed: u64, index: usize) -> HyperConfig {
        let mut rng = rng_for(seed, index as u64);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
            (rng.random::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp().clamp(lo, hi)
        };
        let bandwidth = log_uniform(&mut rng, self.bandwidth);
        let q = rng.random::<f64>() * (self.q.1 - self.q.0) + self.q.0;
        let ridge = log_uniform(&mut rng, self.ridge);
        let centered = self.search_centering && rng.random::<bool>();
        let p = match self.family {
            KernelFamily::Euclidean => 2.0,
            KernelFamily::General => (rng.random::<f64>() * (2.0 - q) + q).clamp(q, 2.0),
        };
        HyperConfig {
            kernel: KernelParams { p, q, bandwidth },
            ridge,
            centered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub kernel: KernelParams,
    pub ridge: f64,
    pub centered: bool,
}

impl HyperConfig {
    pub fn apply(&self, base: &RfmConfig) -> RfmConfig {
        RfmConfig {
            kernel: self.kernel,
            ridge: self.ridge,
            centered: self.centered,
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: HyperConfig,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: HyperConfig,
    pub best_index: usize,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Evaluates `objective(index, config)` for every draw and keeps the
/// highest score, first index on ties. Failed trials are logged and skipped.
pub fn hyperparameter_search<F>(
    space: &HyperSearchSpace,
    objective: F,
    seed: u64,
) -> Result<SearchOutcome>
where
    F: Fn(usize, &HyperConfig) -> Result<f64> + Sync,
{
    space.validate()?;
    let trials: Vec<TrialRecord> = (0..space.draws)
        .into_par_iter()
        .map(|index| {
            let config = space.sample(seed, index);
            match objective(index, &config) {
                Ok(score) if score.is_finite() => TrialRecord {
                    index,
                    config,
                    score: Some(score),
                    error: None,
                },
                Ok(score) => TrialRecord {
                    index,
                    config,
                    score: None,
                    error: Some(format!("non-finite objective {score}")),
                },
                Err(e) => TrialRecord {
                    index,
                    config,
                    score: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for t in &trials {
        match (t.score, &t.error) {
            (Some(s), _) => {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((t.index, s));
                }
            }
            (None, Some(e)) => log::warn!("search trial {} failed: {e}", t.index),
            (None, None) => {}
        }
    }
    let (best_index, best_score) = best.ok_or(Error::SearchFailed(space.draws))?;
    Ok(SearchOutcome {
        best: trials[best_index].config,
        best_index,
        best_score,
        trials,
    })
}

/// Searches RFM hyperparameters by validation score, then refits the winner.
pub fn search_probe(
    features: &DMatrix<f64>,
    targets: &Targets,
    split: &Split,
    space: &HyperSearchSpace,
    base: &RfmConfig,
    seed: u64,
) -> Result<(ConceptProbe, SearchOutcome)> {
    let outcome = hyperparameter_search(
        space,
        |_, cfg| rfm_train(features, targets, split, &cfg.apply(base)).map(|p| p.val_score),
        seed,
    )?;
    let probe = rfm_train(features, targets, split, &outcome.best.apply(base))?;
    Ok((probe, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_in_range() {
        for space in [HyperSearchSpace::layerwise(), HyperSearchSpace::aggregation()] {
            for i in 0..500 {
                let c = space.sample(11, i);
                assert!((1.0..=100.0).contains(&c.kernel.bandwidth));
                assert!((1e-5..=10.0).contains(&c.ridge));
                assert!((0.7..=1.4).contains(&c.kernel.q));
                assert!(c.kernel.q <= c.kernel.p && c.kernel.p <= 2.0);
                c.kernel.validate().unwrap();
                if space.family == KernelFamily::Euclidean {
                    assert_eq!(c.kernel.p, 2.0);
                }
            }
        }
    }

    #[test]
    fn argmax_and_failures() {
        let space = HyperSearchSpace::layerwise().with_draws(10);
        let out = hyperparameter_search(&space, |i, _| Ok(-(i as f64)), 5).unwrap();
        assert_eq!(out.best_index, 0);
        assert_eq!(out.trials.len(), 10);

        let out = hyperparameter_search(
            &space,
            |i, _| {
                if i < 3 {
                    Err(Error::NoSignal)
                } else {
                    Ok(i as f64 % 4.0)
                }
            },
            5,
        )
        .unwrap();
        assert_eq!(out.best_index, 3);
        assert_eq!(out.trials.iter().filter(|t| t.error.is_some()).count(), 3);

        let all_fail = hyperparameter_search(&space, |_, _| Err(Error::NoSignal), 5);
        assert!(matches!(all_fail, Err(Error::SearchFailed(10))));
        assert!(hyperparameter_search(&space.clone().with_draws(0), |_, _| Ok(0.0), 5).is_err());
    }

    #[test]
    fn seeded_trials_repeat() {
        let space = HyperSearchSpace::aggregation().with_draws(20);
        let a = hyperparameter_search(&space, |_, c| Ok(c.kernel.bandwidth), 9).unwrap();
        let b = hyperparameter_search(&space, |_, c| Ok(c.kernel.bandwidth), 9).unwrap();
        assert_eq!(a, b);
        let c = hyperparameter_search(&space, |_, c| Ok(c.kernel.bandwidth), 10).unwrap();
        assert_ne!(a.trials, c.trials);
    }
}
