//! Reference filter importance metrics and single-layer pruning curves.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::engine::{refine_step, sample_ablation, Decision, LayerPruningState};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Masks, ModelParams, Network};
use crate::tensor::{softmax_xent, BnMode, Tensor};
use crate::train::{evaluate, EVAL_CHUNK};

fn conv_width(net: &Network, layer: usize) -> Result<usize> {
    match net.spec().layers.get(layer) {
        Some(l) if l.kind == LayerKind::Conv => Ok(l.width),
        _ => Err(Error::InvalidSpec(format!("layer {layer} is not a conv layer"))),
    }
}

fn mask_with(net: &Network, layer: usize, removed: &[usize]) -> Masks {
    let mut keep = vec![true; net.width(layer)];
    for &j in removed {
        keep[j] = false;
    }
    let mut m = Masks::new();
    m.insert_binary(layer, &keep);
    m
}

/// Summed eval-mode cross-entropy over `data`.
pub fn loss_sum(net: &Network, params: &ModelParams, data: &Dataset, masks: Option<&Masks>) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let (images, labels) = chunk?;
        let logits = net.predict(params, &images, masks)?;
        total += softmax_xent(&logits, &labels)?.per_example.iter().sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleScores {
    /// `(filter, loss increase)` for every filter not already removed.
    pub scores: Vec<(usize, f64)>,
    /// Masked evaluations of the assessment set.
    pub evaluations: usize,
}

/// Loss increase on `assessment` when each surviving filter of `layer` is
/// masked on top of the filters in `removed`.
pub fn oracle_score(
    net: &Network,
    params: &ModelParams,
    layer: usize,
    assessment: &Dataset,
    removed: &[usize],
) -> Result<OracleScores> {
    let width = conv_width(net, layer)?;
    let base = loss_sum(net, params, assessment, Some(&mask_with(net, layer, removed)))?;
    let mut scores = Vec::with_capacity(width - removed.len());
    for j in (0..width).filter(|j| !removed.contains(j)) {
        let mut trial = removed.to_vec();
        trial.push(j);
        let loss = loss_sum(net, params, assessment, Some(&mask_with(net, layer, &trial)))?;
        scores.push((j, loss - base));
    }
    let evaluations = scores.len();
    Ok(OracleScores { scores, evaluations })
}

fn ascending(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    s.into_iter().map(|(j, _)| j).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOrder {
    pub order: Vec<usize>,
    pub evaluations: usize,
}

/// Greedy oracle pruning of `q` filters. With `rescore`, the survivors are
/// scored again after every removal; without it (degraded oracle) one
/// initial scoring fixes the order.
pub fn oracle_prune(
    net: &Network,
    params: &ModelParams,
    layer: usize,
    q: usize,
    assessment: &Dataset,
    rescore: bool,
) -> Result<PruneOrder> {
    let width = conv_width(net, layer)?;
    if q >= width {
        return Err(Error::Config(format!("cannot prune {q} of {width} filters")));
    }
    if !rescore {
        let s = oracle_score(net, params, layer, assessment, &[])?;
        let mut order = ascending(&s.scores);
        order.truncate(q);
        return Ok(PruneOrder { order, evaluations: s.evaluations });
    }
    let mut order = Vec::with_capacity(q);
    let mut evaluations = 0;
    for _ in 0..q {
        let s = oracle_score(net, params, layer, assessment, &order)?;
        evaluations += s.evaluations;
        order.push(ascending(&s.scores)[0]);
    }
    Ok(PruneOrder { order, evaluations })
}

/// L1 norm of every filter's kernel slice.
pub fn magnitude_score(params: &ModelParams, layer: usize) -> Result<Vec<f64>> {
    let conv = params
        .conv(layer)
        .ok_or_else(|| Error::InvalidSpec(format!("layer {layer} has no kernel")))?;
    let width = conv.bias.len();
    let mut out = vec![0.0; width];
    for (i, &v) in conv.kernel.data().iter().enumerate() {
        out[i % width] += (v as f64).abs();
    }
    Ok(out)
}

/// Fraction of zero activations per channel at the end of the layer's
/// conv/BN/ReLU block, over the assessment set. Higher means less important.
pub fn apoz_score(net: &Network, params: &ModelParams, layer: usize, assessment: &Dataset) -> Result<Vec<f64>> {
    let width = conv_width(net, layer)?;
    let point = net.topology().mask_point[layer].expect("conv layers have a mask point");
    let mut zeros = vec![0usize; width];
    let mut total = 0usize;
    for chunk in assessment.chunks(EVAL_CHUNK) {
        let (images, _) = chunk?;
        let rec = net.forward(params, &images, None, BnMode::Eval)?;
        let act = &rec.outputs[point];
        for (i, &v) in act.data().iter().enumerate() {
            if v == 0.0 {
                zeros[i % width] += 1;
            }
        }
        total += act.len() / width;
    }
    Ok(zeros.into_iter().map(|z| z as f64 / total as f64).collect())
}

/// `|mean(dL/dM * M)|` per channel, with `L` the per-example loss and the
/// mean taken over examples and spatial positions.
pub fn taylor_score(net: &Network, params: &ModelParams, layer: usize, assessment: &Dataset) -> Result<Vec<f64>> {
    let width = conv_width(net, layer)?;
    let point = net.topology().mask_point[layer].expect("conv layers have a mask point");
    let mut acc = vec![0.0f64; width];
    let mut count = 0usize;
    for chunk in assessment.chunks(EVAL_CHUNK) {
        let (images, labels) = chunk?;
        let rec = net.forward(params, &images, None, BnMode::Eval)?;
        let x = softmax_xent(rec.logits(), &labels)?;
        let back = net.backward(params, &rec, x.grad_logits, None)?;
        let grad = back.outputs[point].as_ref().expect("mask point lies upstream of the logits");
        // grad_logits is the gradient of the batch mean; rescale to per-example losses
        let n = labels.len() as f64;
        for (i, (&g, &a)) in grad.data().iter().zip(rec.outputs[point].data()).enumerate() {
            acc[i % width] += n * g as f64 * a as f64;
        }
        count += rec.outputs[point].len() / width;
    }
    Ok(acc.into_iter().map(|s| (s / count as f64).abs()).collect())
}

/// Filters in index order.
pub fn index_order(width: usize) -> Vec<usize> {
    (0..width).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    #[serde(rename = "oracle_10x")]
    Oracle10x,
    Degraded,
    Magnitude,
    Apoz,
    Taylor,
    Index,
    AofpSingleLayer,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Oracle,
        Method::Oracle10x,
        Method::Degraded,
        Method::Magnitude,
        Method::Apoz,
        Method::Taylor,
        Method::Index,
        Method::AofpSingleLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Oracle10x => "oracle_10x",
            Method::Degraded => "degraded",
            Method::Magnitude => "magnitude",
            Method::Apoz => "apoz",
            Method::Taylor => "taylor",
            Method::Index => "index",
            Method::AofpSingleLayer => "aofp_single_layer",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Binary filter search on one layer driven by final-loss samples: each
/// batch ablates a random half of the search space and records the loss
/// increase. The search is forced down to a single filter, which is pruned,
/// and restarts on the survivors until `q` filters are gone. The number of
/// examples spent per removal matches what the oracle spends re-scoring the
/// same number of survivors.
pub fn aofp_single_layer_order(
    net: &Network,
    params: &ModelParams,
    layer: usize,
    q: usize,
    assessment: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<PruneOrder> {
    let width = conv_width(net, layer)?;
    if q >= width {
        return Err(Error::Config(format!("cannot prune {q} of {width} filters")));
    }
    let batch_size = batch_size.min(assessment.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(assessment.len(), batch_size, ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?;
    let mut state = LayerPruningState::new(layer, width);
    let mut order = Vec::with_capacity(q);
    let mut evaluations = 0usize;
    let mean_loss = |m: &Masks, images: &Tensor, labels: &[usize]| -> Result<f64> {
        Ok(softmax_xent(&net.predict(params, images, Some(m))?, labels)?.mean_loss)
    };
    while order.len() < q {
        let survivors = width - order.len();
        let rounds = (usize::BITS - (survivors - 1).leading_zeros()) as usize;
        let phi = (survivors * assessment.len() / (batch_size * rounds)).max(1);
        loop {
            let mut taken = 0;
            while taken < phi || state.unsampled().is_some() {
                let (images, labels) = assessment.batch(&sampler.next_indices())?;
                let base = mean_loss(&mask_with(net, layer, &order), &images, &labels)?;
                let ablated = sample_ablation(&state.search_space, &mut rng)?;
                let removed: Vec<usize> = order.iter().copied().chain(ablated.iter().copied()).collect();
                let t = mean_loss(&mask_with(net, layer, &removed), &images, &labels)? - base;
                state.record(&ablated, t);
                evaluations += 1;
                taken += 1;
            }
            if let Decision::LayerFinished { picked, .. } = refine_step(&mut state, f64::NEG_INFINITY)? {
                let j = picked[0];
                order.push(j);
                state.base[j] = false;
                state.restart();
                break;
            }
        }
    }
    Ok(PruneOrder { order, evaluations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub filters_pruned: usize,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningCurve {
    pub method: Method,
    pub points: Vec<CurvePoint>,
    pub assessment_size: usize,
    pub order: Vec<usize>,
}

impl PruningCurve {
    /// Area under the accuracy curve by the trapezoid rule, divided by the
    /// number of pruned filters.
    pub fn auc(&self) -> f64 {
        let q = self.points.last().map_or(0, |p| p.filters_pruned);
        if q == 0 {
            return self.points.first().map_or(0.0, |p| p.top1);
        }
        let area: f64 = self
            .points
            .windows(2)
            .map(|w| 0.5 * (w[0].top1 + w[1].top1) * (w[1].filters_pruned - w[0].filters_pruned) as f64)
            .sum();
        area / q as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CurveData<'a> {
    pub assessment: &'a Dataset,
    /// Ten times larger assessment set for the `oracle_10x` method.
    pub assessment_10x: Option<&'a Dataset>,
    pub eval: &'a Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurveConfig {
    /// Number of filters to remove.
    pub q: usize,
    /// Batch size of the single-layer binary search.
    pub aofp_batch: usize,
    pub seed: u64,
}

/// Pruning order of `q` filters of `layer` for a method. Heuristic metrics
/// are computed once on the unpruned layer.
pub fn pruning_order(
    net: &Network,
    params: &ModelParams,
    layer: usize,
    method: Method,
    data: CurveData<'_>,
    cfg: CurveConfig,
) -> Result<Vec<usize>> {
    let width = conv_width(net, layer)?;
    if cfg.q >= width {
        return Err(Error::Config(format!("cannot prune {} of {width} filters", cfg.q)));
    }
    let by_score = |scores: Vec<f64>, descending: bool| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            let o = scores[a].total_cmp(&scores[b]);
            if descending { o.reverse() } else { o }.then(a.cmp(&b))
        });
        idx.truncate(cfg.q);
        idx
    };
    Ok(match method {
        Method::Oracle => oracle_prune(net, params, layer, cfg.q, data.assessment, true)?.order,
        Method::Oracle10x => {
            let big = data
                .assessment_10x
                .ok_or_else(|| Error::Config("oracle_10x needs the larger assessment set".into()))?;
            oracle_prune(net, params, layer, cfg.q, big, true)?.order
        }
        Method::Degraded => oracle_prune(net, params, layer, cfg.q, data.assessment, false)?.order,
        Method::Magnitude => by_score(magnitude_score(params, layer)?, false),
        Method::Apoz => by_score(apoz_score(net, params, layer, data.assessment)?, true),
        Method::Taylor => by_score(taylor_score(net, params, layer, data.assessment)?, false),
        Method::Index => index_order(width)[..cfg.q].to_vec(),
        Method::AofpSingleLayer => {
            aofp_single_layer_order(net, params, layer, cfg.q, data.assessment, cfg.aofp_batch, cfg.seed)?.order
        }
    })
}

/// Masks filters one at a time in the method's order and records the
/// evaluation accuracy after each removal (no finetuning).
pub fn pruning_curve(
    net: &Network,
    params: &ModelParams,
    layer: usize,
    method: Method,
    data: CurveData<'_>,
    cfg: CurveConfig,
) -> Result<PruningCurve> {
    let order = pruning_order(net, params, layer, method, data, cfg)?;
    let mut points = Vec::with_capacity(order.len() + 1);
    for k in 0..=order.len() {
        let m = mask_with(net, layer, &order[..k]);
        let top1 = evaluate(net, params, data.eval, Some(&m))?.top1;
        points.push(CurvePoint { filters_pruned: k, top1 });
    }
    let assessment_size = match method {
        Method::Oracle10x => data.assessment_10x.map_or(0, Dataset::len),
        Method::Magnitude | Method::Index => 0,
        _ => data.assessment.len(),
    };
    Ok(PruningCurve { method, points, assessment_size, order })
}

pub fn write_curves_csv(curves: &[PruningCurve], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,filters_pruned,top1")?;
    for c in curves {
        for p in &c.points {
            writeln!(out, "{},{},{}", c.method.name(), p.filters_pruned, p.top1)?;
        }
    }
    Ok(())
}
