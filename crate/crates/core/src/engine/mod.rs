//! Approximated oracle filter pruning.
//!
//! Every prunable conv layer runs its own binary filter search. The network
//! keeps training on the base path (all base masks applied) while each layer
//! scores random ablations of its search space on a read-only scoring path
//! that ends at the output of its successor block.

mod run;
mod state;

pub use run::{
    aofp_run, aofp_search, aofp_search_observed, write_moves_json, write_trajectory_csv, AofpConfig, AofpOutcome, MoveRecord,
    PruneTrajectory, RefineEvent, SearchOutcome, Termination, TrajectoryRow,
};
pub use state::{half, refine_step, refine_step_with, sample_ablation, Decision, LayerPruningState, Phase};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BnSource, ForwardRecord, Masks, ModelParams, Network};
use crate::tensor::Tensor;

/// Denominators below this make a damage sample meaningless.
pub const MIN_DAMAGE_NORM: f64 = 1e-12;

fn same_shape(base: &Tensor, scored: &Tensor) -> Result<()> {
    if base.shape() != scored.shape() {
        return Err(Error::Shape(format!(
            "damage between {:?} and {:?}",
            base.shape(),
            scored.shape()
        )));
    }
    Ok(())
}

fn ratio(base: &[f32], scored: &[f32]) -> Option<f64> {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&b, &s) in base.iter().zip(scored) {
        let (b, s) = (b as f64, s as f64);
        num += (b - s) * (b - s);
        den += b * b;
    }
    (den >= MIN_DAMAGE_NORM).then(|| num / den)
}

/// `||base - scored||^2 / ||base||^2` over the whole batch, or `None` when
/// the base output is (numerically) zero.
pub fn isolated_damage(base: &Tensor, scored: &Tensor) -> Result<Option<f64>> {
    same_shape(base, scored)?;
    Ok(ratio(base.data(), scored.data()))
}

/// Mean of the per-example damage ratios; examples with a zero base output
/// are skipped.
pub fn isolated_damage_per_example(base: &Tensor, scored: &Tensor) -> Result<Option<f64>> {
    same_shape(base, scored)?;
    let n = base.shape()[0];
    let per = base.len() / n;
    let samples: Vec<f64> = base
        .data()
        .chunks(per)
        .zip(scored.data().chunks(per))
        .filter_map(|(b, s)| ratio(b, s))
        .collect();
    Ok((!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoringOptions {
    pub bn_source: BnSource,
    pub per_example: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self { bn_source: BnSource::Base, per_example: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringSample {
    pub ablated: Vec<usize>,
    /// `None` when the sample was discarded.
    pub t: Option<f64>,
}

/// Output of the successor block of `layer` when the channels in `ablated`
/// are additionally zeroed at the layer's mask point.
pub fn ablated_successor_output(
    net: &Network,
    params: &ModelParams,
    record: &ForwardRecord,
    masks: &Masks,
    layer: usize,
    ablated: &[usize],
    bn_source: BnSource,
) -> Result<Tensor> {
    let topo = net.topology();
    let succ = topo.successor[layer]
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec(format!("layer {layer} has no successor")))?;
    let point = topo.mask_point[layer].ok_or_else(|| Error::InvalidSpec(format!("layer {layer} is not a conv")))?;
    let mut input = record.outputs[point].clone();
    let mut keep = vec![1.0f32; net.width(layer)];
    for &j in ablated {
        keep[j] = 0.0;
    }
    input.scale_channels(&keep)?;
    net.run_path(params, input, &succ.path, record, Some(masks), bn_source)
}

/// One scoring pass for `state`'s layer on the batch behind `record`.
///
/// Draws the ablated set from the search space, records the resulting
/// isolated damage for every ablated filter and leaves the base path
/// untouched.
pub fn scoring_pass(
    net: &Network,
    params: &ModelParams,
    record: &ForwardRecord,
    masks: &Masks,
    state: &mut LayerPruningState,
    rng: &mut impl Rng,
    opts: ScoringOptions,
) -> Result<ScoringSample> {
    let ablated = sample_ablation(&state.search_space, rng)?;
    state.scoring = state.base.clone();
    for &j in &ablated {
        state.scoring[j] = false;
    }
    let scored = ablated_successor_output(net, params, record, masks, state.layer, &ablated, opts.bn_source)?;
    let output_point = net.topology().successor[state.layer].as_ref().expect("checked above").output_point;
    let base = &record.outputs[output_point];
    let t = if opts.per_example {
        isolated_damage_per_example(base, &scored)?
    } else {
        isolated_damage(base, &scored)?
    };
    state.samples_this_step += 1;
    if let Some(t) = t {
        state.record(&ablated, t);
    }
    Ok(ScoringSample { ablated, t })
}
