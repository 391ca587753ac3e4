//! A small frozen autoregressive model with a residual stream.
//!
//! Each block reads its input stream `x`, the causal running mean of that
//! stream (a cheap stand-in for attention) and the previous step's input,
//! and adds a gated nonlinearity back onto the stream:
//!
//! ```text
//! u = tanh(A x̂ + c·B m̂ + l·P x̂₋₁ + b_u)
//! g = σ(G x̂ + b_g)
//! h = x + s·W (g ⊙ u)
//! ```
//!
//! where `x̂` denotes RMS normalization. Logits use the transposed embedding.

mod data;
mod generate;

pub use data::{count_bigram, ConceptKind, ConceptSpec, Dataset};
pub use generate::{generate, GenerationTrace, RecordOptions};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfm::Pooling;
use crate::rng::rng_for;

/// Where a layer's steering vector enters the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionPoint {
    /// Added to the block's output, before the next layer.
    #[default]
    Post,
    /// Added to the block's input.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    /// Norm of a token embedding.
    pub embed_scale: f64,
    /// Output scale `s` of every block.
    pub block_scale: f64,
    /// Weight `c` of the running-mean context path.
    pub context_weight: f64,
    /// Weight `l` of the previous-step path.
    pub lag_weight: f64,
    pub logit_gain: f64,
    pub injection: InjectionPoint,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 64,
            vocab: 32,
            embed_scale: 2.0,
            block_scale: 0.1,
            context_weight: 0.5,
            lag_weight: 0.5,
            logit_gain: 0.5,
            injection: InjectionPoint::Post,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.hidden < 8 || self.vocab < 4 {
            return Err(Error::InvalidParameter(format!(
                "model needs layers >= 1, hidden >= 8, vocab >= 4; got {}, {}, {}",
                self.layers, self.hidden, self.vocab
            )));
        }
        let scales = [
            self.embed_scale,
            self.block_scale,
            self.context_weight,
            self.lag_weight,
            self.logit_gain,
        ];
        if scales.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.embed_scale == 0.0 {
            return Err(Error::InvalidParameter(
                "model scales must be finite and non-negative, embed_scale positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// `[A | c·B | l·P]`, `d × 3d`.
    mix: DMatrix<f64>,
    gate: DMatrix<f64>,
    out: DMatrix<f64>,
    bias_u: DVector<f64>,
    bias_g: DVector<f64>,
}

/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    config: ModelConfig,
    seed: u64,
    embedding: DMatrix<f64>,
    blocks: Vec<Block>,
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, stream);
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

fn rms_normalize(v: &mut [f64]) {
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    if ms > 0.0 {
        let inv = 1.0 / ms.sqrt();
        v.iter_mut().for_each(|x| *x *= inv);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Incremental per-layer state for step-by-step decoding.
#[derive(Debug, Clone)]
pub(crate) struct StepState {
    sums: Vec<DVector<f64>>,
    prev: Vec<DVector<f64>>,
    steps: usize,
}

impl FrozenModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let embedding = gaussian(config.vocab, d, config.embed_scale / (d as f64).sqrt(), seed, 0);
        let inv = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let s = 16 * (l as u64 + 1);
                let mut mix = DMatrix::zeros(d, 3 * d);
                mix.columns_mut(0, d).copy_from(&gaussian(d, d, inv, seed, s));
                mix.columns_mut(d, d)
                    .copy_from(&gaussian(d, d, inv * config.context_weight, seed, s + 1));
                mix.columns_mut(2 * d, d)
                    .copy_from(&gaussian(d, d, inv * config.lag_weight, seed, s + 2));
                Block {
                    mix,
                    gate: gaussian(d, d, inv, seed, s + 3),
                    out: gaussian(d, d, inv * config.block_scale, seed, s + 4),
                    bias_u: gaussian(d, 1, 0.1, seed, s + 5).column(0).into_owned(),
                    bias_g: gaussian(d, 1, 0.5, seed, s + 6).column(0).into_owned(),
                }
            })
            .collect();
        Ok(Self {
            config,
            seed,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn embedding(&self) -> &DMatrix<f64> {
        &self.embedding
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |m: &[f64]| {
            for v in m {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.embedding.as_slice());
        for b in &self.blocks {
            eat(b.mix.as_slice());
            eat(b.gate.as_slice());
            eat(b.out.as_slice());
            eat(b.bias_u.as_slice());
            eat(b.bias_g.as_slice());
        }
        h
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::InvalidParameter(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Hidden states of every layer for a whole sequence: entry `ℓ` is the
    /// `T × d` stream after block `ℓ`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        self.check_tokens(tokens)?;
        let (t_len, d) = (tokens.len(), self.config.hidden);
        let mut x = DMatrix::from_fn(t_len, d, |t, j| self.embedding[(tokens[t], j)]);
        let mut out = Vec::with_capacity(self.config.layers);
        for block in &self.blocks {
            // [x̂ | m̂ | x̂₋₁] row by row
            let mut z = DMatrix::zeros(t_len, 3 * d);
            let mut sum = vec![0.0; d];
            for t in 0..t_len {
                let mut xn: Vec<f64> = x.row(t).iter().copied().collect();
                for (s, v) in sum.iter_mut().zip(&xn) {
                    *s += v;
                }
                rms_normalize(&mut xn);
                let mut mean: Vec<f64> = sum.iter().map(|s| s / (t + 1) as f64).collect();
                rms_normalize(&mut mean);
                for j in 0..d {
                    z[(t, j)] = xn[j];
                    z[(t, d + j)] = mean[j];
                    if t + 1 < t_len {
                        z[(t + 1, 2 * d + j)] = xn[j];
                    }
                }
            }
            let u = &z * block.mix.transpose();
            let g = z.columns(0, d) * block.gate.transpose();
            let act = DMatrix::from_fn(t_len, d, |t, j| {
                sigmoid(g[(t, j)] + block.bias_g[j]) * (u[(t, j)] + block.bias_u[j]).tanh()
            });
            x += act * block.out.transpose();
            out.push(x.clone());
        }
        Ok(out)
    }

    pub(crate) fn start_state(&self) -> StepState {
        let d = self.config.hidden;
        StepState {
            sums: vec![DVector::zeros(d); self.config.layers],
            prev: vec![DVector::zeros(d); self.config.layers],
            steps: 0,
        }
    }

    /// Advances one token. `inject(ℓ, stream)` may add steering to layer `ℓ`;
    /// `record(ℓ, h)` sees each post-block stream. Returns the final stream.
    pub(crate) fn step(
        &self,
        state: &mut StepState,
        token: usize,
        mut inject: impl FnMut(usize, &mut DVector<f64>),
        mut record: impl FnMut(usize, &DVector<f64>),
    ) -> DVector<f64> {
        let d = self.config.hidden;
        let mut x = self.embedding.row(token).transpose();
        state.steps += 1;
        let n = state.steps as f64;
        let mut z = DVector::zeros(3 * d);
        for (l, block) in self.blocks.iter().enumerate() {
            if self.config.injection == InjectionPoint::Pre {
                inject(l, &mut x);
            }
            state.sums[l] += &x;
            let mut xn: Vec<f64> = x.iter().copied().collect();
            rms_normalize(&mut xn);
            let mut mean: Vec<f64> = state.sums[l].iter().map(|s| s / n).collect();
            rms_normalize(&mut mean);
            for j in 0..d {
                z[j] = xn[j];
                z[d + j] = mean[j];
                z[2 * d + j] = state.prev[l][j];
            }
            let u = &block.mix * &z;
            let g = &block.gate * z.rows(0, d);
            let act = DVector::from_fn(d, |j, _| {
                sigmoid(g[j] + block.bias_g[j]) * (u[j] + block.bias_u[j]).tanh()
            });
            state.prev[l].copy_from_slice(&xn);
            x += &block.out * act;
            if self.config.injection == InjectionPoint::Post {
                inject(l, &mut x);
            }
            record(l, &x);
        }
        x
    }

    /// Next-token logits from the final stream.
    pub fn logits(&self, last: &DVector<f64>) -> DVector<f64> {
        (&self.embedding * last) * self.config.logit_gain
    }

    /// Logits after every position of an unsteered sequence.
    pub fn sequence_logits(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        let states = self.forward(tokens)?;
        let last = states.last().expect("at least one layer");
        Ok(last * self.embedding.transpose() * self.config.logit_gain)
    }

    /// Pooled `L × d` features of one sequence.
    pub fn extract_features(&self, tokens: &[usize], pooling: Pooling) -> Result<DMatrix<f64>> {
        let states = self.forward(tokens)?;
        Ok(pool_states(&states, pooling))
    }

    /// Pooled features for many sequences, one `n × d` matrix per layer.
    pub fn dataset_features(
        &self,
        sequences: &[Vec<usize>],
        pooling: Pooling,
    ) -> Result<Vec<DMatrix<f64>>> {
        let pooled: Vec<DMatrix<f64>> = sequences
            .par_iter()
            .map(|s| self.extract_features(s, pooling))
            .collect::<Result<_>>()?;
        let (n, d) = (sequences.len(), self.config.hidden);
        Ok((0..self.config.layers)
            .map(|l| DMatrix::from_fn(n, d, |i, j| pooled[i][(l, j)]))
            .collect())
    }
}

/// Row `ℓ` pools the `T × d` states of layer `ℓ`.
pub fn pool_states(states: &[DMatrix<f64>], pooling: Pooling) -> DMatrix<f64> {
    let d = states.first().map_or(0, |s| s.ncols());
    let mut out = DMatrix::zeros(states.len(), d);
    for (l, s) in states.iter().enumerate() {
        match pooling {
            Pooling::Mean => out.set_row(l, &s.row_mean()),
            Pooling::LastToken => out.set_row(l, &s.row(s.nrows() - 1)),
        }
    }
    out
}
