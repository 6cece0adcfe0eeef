use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::{refine_step_with, Decision, LayerPruningState, Phase};
use super::{scoring_pass, ScoringOptions};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::graph::{
    effective_flops, flops_of, reconstruct, BnSource, LayerGrads, LayerKind, Masks, ModelParams, Network, NetworkSpec,
};
use crate::tensor::{softmax_xent, BnMode};
use crate::train::{finetune, update_bn_running, Sgd, StepLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Finished layers start a new move right away.
    Global,
    /// Finished layers stay finished.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AofpConfig {
    /// Refinement threshold: a picked set is pruned when its largest
    /// estimated damage is below this value.
    pub theta: f64,
    /// Scoring batches per refinement step.
    pub phi: usize,
    /// Fraction of the original FLOPs to remove.
    pub target_flops_drop: f64,
    pub termination: Termination,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Width snapshot cadence in batches.
    pub trajectory_every: usize,
    /// Scoring-path batch norm uses the base path's statistics.
    pub bn_stats_from_base: bool,
    /// Average per-example damage ratios instead of one ratio per batch.
    pub per_example_damage: bool,
    /// Disables every scoring pass (the base path is unaffected).
    pub scoring: bool,
    /// A prune of more than one filter that would overshoot the target by
    /// more than this fraction of the original FLOPs is refined instead.
    pub max_overshoot: Option<f64>,
    /// Layers to prune; all prunable layers when absent.
    pub layers: Option<Vec<usize>>,
    /// Recovery schedule after reconstruction.
    pub finetune: Option<TrainConfig>,
}

impl Default for AofpConfig {
    fn default() -> Self {
        Self {
            theta: 0.01,
            phi: 2000,
            target_flops_drop: 0.4,
            termination: Termination::Global,
            seed: 0,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            max_steps: 200_000,
            trajectory_every: 200,
            bn_stats_from_base: true,
            per_example_damage: false,
            scoring: true,
            max_overshoot: None,
            layers: None,
            finetune: Some(TrainConfig {
                lr_schedule: vec![(0, 0.01), (200, 0.001)],
                weight_decay: 0.0,
                ..TrainConfig::desk(400, 0)
            }),
        }
    }
}

impl AofpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_nan() || self.phi == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("theta must be a number; phi, batch size and max steps positive".into()));
        }
        if !(self.target_flops_drop > 0.0 && self.target_flops_drop <= 1.0) {
            return Err(Error::Config(format!("target FLOPs drop {} outside (0, 1]", self.target_flops_drop)));
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("lr must be non-negative and momentum in [0, 1)".into()));
        }
        if let Some(ft) = &self.finetune {
            ft.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub layer: usize,
    pub pruned: Vec<usize>,
    pub granularity: usize,
    pub p: f64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineEvent {
    pub step: usize,
    pub layer: usize,
    pub search_space: usize,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub layer: usize,
    pub remaining_width: usize,
    /// Zero on periodic snapshots.
    pub move_granularity: usize,
    pub p: Option<f64>,
    pub flops_effective: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTrajectory {
    pub base_flops: u64,
    pub rows: Vec<TrajectoryRow>,
    pub moves: Vec<MoveRecord>,
    pub events: Vec<RefineEvent>,
}

pub fn write_trajectory_csv(t: &PruneTrajectory, mut out: impl Write) -> Result<()> {
    writeln!(out, "step,layer,remaining_width,move_granularity,p,flops_effective")?;
    for r in &t.rows {
        let p = r.p.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.layer, r.remaining_width, r.move_granularity, p, r.flops_effective
        )?;
    }
    Ok(())
}

pub fn write_moves_json(t: &PruneTrajectory, out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, &t.moves)?;
    Ok(())
}

/// The masked network at the end of the search, before reconstruction.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub params: ModelParams,
    pub masks: Masks,
    pub states: Vec<LayerPruningState>,
    pub trajectory: PruneTrajectory,
    pub steps: usize,
    pub base_flops: u64,
    pub final_flops: u64,
    pub reduction: f64,
    pub reached_target: bool,
}

#[derive(Clone, Debug)]
pub struct AofpOutcome {
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub search: SearchOutcome,
    pub finetune_log: Vec<StepLog>,
}

fn target_layers(net: &Network, cfg: &AofpConfig) -> Result<Vec<usize>> {
    let layers = cfg.layers.clone().unwrap_or_else(|| net.spec().prunable_layers());
    if layers.is_empty() {
        return Err(Error::InvalidSpec("network has no prunable layer".into()));
    }
    for &l in &layers {
        let spec = net.spec().layers.get(l).ok_or_else(|| Error::InvalidSpec(format!("no layer {l}")))?;
        if !spec.prunable || net.topology().successor[l].is_none() {
            return Err(Error::InvalidSpec(format!("layer {l} is not prunable")));
        }
        if spec.width < 2 {
            return Err(Error::InvalidSpec(format!("layer {l} needs at least two filters")));
        }
    }
    Ok(layers)
}

/// Zeroes the optimizer velocity of the given filters and of the batch norm
/// channels in their block, so momentum cannot move pruned filters.
fn freeze_velocity(net: &Network, sgd: &mut Sgd, layer: usize, filters: &[usize]) {
    let width = net.width(layer);
    let vel = sgd.velocity_mut();
    if let LayerGrads::Conv { kernel, bias } = &mut vel.layers[layer] {
        for (i, v) in kernel.data_mut().iter_mut().enumerate() {
            if filters.contains(&(i % width)) {
                *v = 0.0;
            }
        }
        for &j in filters {
            bias.data_mut()[j] = 0.0;
        }
    }
    let topo = net.topology();
    let point = topo.mask_point[layer].unwrap_or(layer);
    let mut cur = layer;
    while cur != point {
        cur = topo.consumers[cur][0];
        if net.layer(cur).kind == LayerKind::Bn {
            if let LayerGrads::Bn { gamma, beta } = &mut vel.layers[cur] {
                for &j in filters {
                    gamma.data_mut()[j] = 0.0;
                    beta.data_mut()[j] = 0.0;
                }
            }
        }
    }
}

fn snapshot(t: &mut PruneTrajectory, step: usize, states: &[LayerPruningState], flops: u64) {
    for s in states {
        t.rows.push(TrajectoryRow {
            step,
            layer: s.layer,
            remaining_width: s.remaining_count(),
            move_granularity: 0,
            p: None,
            flops_effective: flops,
        });
    }
}

pub fn aofp_search(net: &Network, params: ModelParams, data: &Dataset, cfg: &AofpConfig) -> Result<SearchOutcome> {
    aofp_search_observed(net, params, data, cfg, |_, _| {})
}

/// Runs the simultaneous binary filter search until the FLOPs target is met,
/// every layer has finished (per-layer termination) or `max_steps` batches
/// have been used. `observe` sees the parameters after every update.
pub fn aofp_search_observed(
    net: &Network,
    mut params: ModelParams,
    data: &Dataset,
    cfg: &AofpConfig,
    mut observe: impl FnMut(usize, &ModelParams),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.check(net.spec(), net.topology())?;
    let layers = target_layers(net, cfg)?;
    let spec = net.spec();
    let base_flops = flops_of(spec)?;
    let mut states: Vec<LayerPruningState> = layers.iter().map(|&l| LayerPruningState::new(l, net.width(l))).collect();
    let mut masks = Masks::new();
    for s in &states {
        masks.insert_binary(s.layer, &s.base);
    }
    let mut rngs: Vec<ChaCha8Rng> = layers
        .iter()
        .map(|&l| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(l as u64 + 1);
            r
        })
        .collect();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut sgd = Sgd::new(&params, cfg.momentum, 0.0);
    let opts = ScoringOptions {
        bn_source: if cfg.bn_stats_from_base { BnSource::Base } else { BnSource::Own },
        per_example: cfg.per_example_damage,
    };
    let mut trajectory = PruneTrajectory { base_flops, ..Default::default() };
    let mut flops = base_flops;
    let mut reached = false;
    let mut step = 0;
    snapshot(&mut trajectory, 0, &states, flops);

    while step < cfg.max_steps && !reached {
        let (images, labels) = data.batch(&sampler.next_indices())?;
        let record = net.forward(&params, &images, Some(&masks), BnMode::Train)?;
        if cfg.scoring {
            for (s, rng) in states.iter_mut().zip(rngs.iter_mut()) {
                if s.phase == Phase::Searching {
                    scoring_pass(net, &params, &record, &masks, s, rng, opts)?;
                }
            }
        }
        let xent = softmax_xent(record.logits(), &labels).map_err(|_| Error::Diverged { step, loss: f64::NAN })?;
        let back = net.backward(&params, &record, xent.grad_logits, Some(&masks))?;
        update_bn_running(&mut params, &record);
        sgd.step(&mut params, &back.params, cfg.lr)?;
        step += 1;
        observe(step, &params);

        for s in states.iter_mut() {
            if s.phase != Phase::Searching || s.samples_this_step < cfg.phi || s.unsampled().is_some() {
                continue;
            }
            let remaining = s.remaining_count();
            let layer = s.layer;
            let allow = |picked: &[usize]| -> bool {
                let Some(limit) = cfg.max_overshoot else { return true };
                if picked.len() <= 1 {
                    return true;
                }
                let mut trial = masks.clone();
                let mut keep: Vec<bool> = trial.get(layer).expect("layer is masked").iter().map(|&v| v != 0.0).collect();
                for &j in picked {
                    keep[j] = false;
                }
                trial.insert_binary(layer, &keep);
                let after = effective_flops(spec, &trial).unwrap_or(0) as f64;
                let reduction = 1.0 - after / base_flops as f64;
                reduction - cfg.target_flops_drop <= limit
            };
            let search_space = s.search_space.len();
            let decision = refine_step_with(s, cfg.theta, allow)?;
            trajectory.events.push(RefineEvent { step, layer, search_space, decision: decision.clone() });
            match decision {
                Decision::Pruned { picked, p } => {
                    masks.insert_binary(layer, &s.base);
                    freeze_velocity(net, &mut sgd, layer, &picked);
                    flops = effective_flops(spec, &masks)?;
                    trajectory.rows.push(TrajectoryRow {
                        step,
                        layer,
                        remaining_width: remaining - picked.len(),
                        move_granularity: picked.len(),
                        p: Some(p),
                        flops_effective: flops,
                    });
                    trajectory.moves.push(MoveRecord { layer, granularity: picked.len(), pruned: picked, p, step });
                    if 1.0 - flops as f64 / base_flops as f64 >= cfg.target_flops_drop {
                        reached = true;
                        break;
                    }
                    if s.remaining_count() < 2 {
                        s.phase = Phase::Finished;
                    }
                }
                Decision::LayerFinished { .. } => {
                    if cfg.termination == Termination::Global && s.remaining_count() > 1 {
                        s.restart();
                    }
                }
                Decision::Refined { .. } => {}
            }
        }
        if cfg.trajectory_every > 0 && step % cfg.trajectory_every == 0 {
            snapshot(&mut trajectory, step, &states, flops);
        }
        if states.iter().all(|s| s.phase == Phase::Finished) {
            break;
        }
    }
    if cfg.trajectory_every == 0 || step % cfg.trajectory_every != 0 {
        snapshot(&mut trajectory, step, &states, flops);
    }
    Ok(SearchOutcome {
        params,
        masks,
        states,
        trajectory,
        steps: step,
        base_flops,
        final_flops: flops,
        reduction: 1.0 - flops as f64 / base_flops as f64,
        reached_target: reached,
    })
}

/// Search, physical reconstruction and (optionally) finetuning.
pub fn aofp_run(net: &Network, params: ModelParams, data: &Dataset, cfg: &AofpConfig) -> Result<AofpOutcome> {
    let search = aofp_search(net, params, data, cfg)?;
    let (spec, pruned) = reconstruct(net, &search.params, &search.masks)?;
    let (params, finetune_log) = match &cfg.finetune {
        Some(ft) => {
            let out = finetune(&Network::new(spec.clone())?, pruned, data, ft)?;
            (out.params, out.log)
        }
        None => (pruned, Vec::new()),
    };
    Ok(AofpOutcome { spec, params, search, finetune_log })
}
