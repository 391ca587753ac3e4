//! Aggregation probe over the stacked outputs of per-layer probes.

use nalgebra::DMatrix;

use super::probe::{ConceptProbe, RfmConfig, Targets};
use super::scoring::Split;
use super::search::{search_probe, HyperSearchSpace, SearchOutcome};
use crate::error::{ensure_dims, Error, Result};

/// Row `i` is the concatenation of every layer probe's raw outputs for sample
/// `i`, in layer order. `features[k]` feeds `probes[k]`.
pub fn stack_layer_outputs(
    probes: &[ConceptProbe],
    features: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    ensure_dims(probes.len(), features.len())?;
    if probes.is_empty() {
        return Err(Error::EmptyInput("layer probes"));
    }
    let outputs: Vec<DMatrix<f64>> = probes
        .iter()
        .zip(features)
        .map(|(p, x)| p.raw_outputs(x))
        .collect::<Result<_>>()?;
    let n = outputs[0].nrows();
    let width: usize = outputs.iter().map(|o| o.ncols()).sum();
    let mut stacked = DMatrix::zeros(n, width);
    let mut col = 0;
    for o in &outputs {
        ensure_dims(n, o.nrows())?;
        stacked.columns_mut(col, o.ncols()).copy_from(o);
        col += o.ncols();
    }
    Ok(stacked)
}

/// Fits an RFM probe over `layers * channels` stacked predictions, tuning over
/// the general `K_{p,q}` family.
pub fn train_aggregation_model(
    per_layer_predictions: &DMatrix<f64>,
    layers: usize,
    targets: &Targets,
    split: &Split,
    space: &HyperSearchSpace,
    base: &RfmConfig,
    seed: u64,
) -> Result<(ConceptProbe, SearchOutcome)> {
    if layers == 0 || !per_layer_predictions.ncols().is_multiple_of(layers) {
        return Err(Error::InvalidParameter(format!(
            "{} stacked columns do not divide into {layers} layers",
            per_layer_predictions.ncols()
        )));
    }
    let channels = match targets {
        Targets::Multiclass { classes, .. } => *classes,
        _ => 1,
    };
    ensure_dims(layers * channels, per_layer_predictions.ncols())?;
    let (mut probe, outcome) =
        search_probe(per_layer_predictions, targets, split, space, base, seed)?;
    probe.layer = None;
    Ok((probe, outcome))
}
