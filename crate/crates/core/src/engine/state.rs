use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Searching,
    Finished,
}

/// Binary filter search state of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPruningState {
    pub layer: usize,
    /// Base mask `u`: `false` marks a permanently pruned filter.
    pub base: Vec<bool>,
    /// Scoring mask `v` of the most recent scoring pass.
    pub scoring: Vec<bool>,
    /// Search space, ascending filter indices.
    pub search_space: Vec<usize>,
    /// Picked set of the latest refinement step.
    pub picked: Option<Vec<usize>>,
    /// Damage samples per filter index.
    pub records: Vec<Vec<f64>>,
    /// Scoring batches since the last decision.
    pub samples_this_step: usize,
    pub phase: Phase,
}

impl LayerPruningState {
    pub fn new(layer: usize, width: usize) -> Self {
        Self {
            layer,
            base: vec![true; width],
            scoring: vec![true; width],
            search_space: (0..width).collect(),
            picked: None,
            records: vec![Vec::new(); width],
            samples_this_step: 0,
            phase: Phase::Searching,
        }
    }

    pub fn width(&self) -> usize {
        self.base.len()
    }

    pub fn remaining(&self) -> Vec<usize> {
        (0..self.width()).filter(|&j| self.base[j]).collect()
    }

    pub fn remaining_count(&self) -> usize {
        self.base.iter().filter(|&&b| b).count()
    }

    pub fn clear_records(&mut self) {
        self.records.iter_mut().for_each(Vec::clear);
        self.samples_this_step = 0;
    }

    /// Starts a fresh move over every remaining filter.
    pub fn restart(&mut self) {
        self.search_space = self.remaining();
        self.picked = None;
        self.scoring = self.base.clone();
        self.clear_records();
        self.phase = Phase::Searching;
    }

    /// Appends `t` to the record of every filter in `ablated`.
    pub fn record(&mut self, ablated: &[usize], t: f64) {
        for &j in ablated {
            self.records[j].push(t);
        }
    }

    /// Mean recorded sample of every filter in the search space.
    pub fn estimate_importance(&self) -> Result<Vec<(usize, f64)>> {
        self.search_space
            .iter()
            .map(|&j| {
                let r = &self.records[j];
                if r.is_empty() {
                    Err(Error::MissingSamples { layer: self.layer, filter: j })
                } else {
                    Ok((j, r.iter().sum::<f64>() / r.len() as f64))
                }
            })
            .collect()
    }

    /// First search-space filter without any sample.
    pub fn unsampled(&self) -> Option<usize> {
        self.search_space.iter().copied().find(|&j| self.records[j].is_empty())
    }
}

/// Half of `n`, but at least one.
pub fn half(n: usize) -> usize {
    (n / 2).max(1)
}

/// Uniformly random subset of `space` with `max(1, floor(|space|/2))`
/// elements, in ascending order.
pub fn sample_ablation(space: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    if space.is_empty() {
        return Err(Error::EmptySearchSpace);
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, space.len(), half(space.len()))
        .into_iter()
        .map(|i| space[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Pruned { picked: Vec<usize>, p: f64 },
    Refined { picked: Vec<usize>, p: f64 },
    LayerFinished { picked: Vec<usize>, p: f64 },
}

impl Decision {
    pub fn picked(&self) -> &[usize] {
        match self {
            Decision::Pruned { picked, .. } | Decision::Refined { picked, .. } | Decision::LayerFinished { picked, .. } => {
                picked
            }
        }
    }

    pub fn p(&self) -> f64 {
        match self {
            Decision::Pruned { p, .. } | Decision::Refined { p, .. } | Decision::LayerFinished { p, .. } => *p,
        }
    }
}

/// Picks the least important half of the search space and decides.
///
/// `allow_prune` lets the caller veto a commit (the picked set is then
/// refined if it holds more than one filter). A layer is never pruned to
/// zero filters: that case finishes the layer instead.
pub fn refine_step_with(state: &mut LayerPruningState, theta: f64, allow_prune: impl Fn(&[usize]) -> bool) -> Result<Decision> {
    if state.search_space.is_empty() {
        return Err(Error::EmptySearchSpace);
    }
    let mut est = state.estimate_importance()?;
    est.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let k = half(est.len());
    let mut picked: Vec<usize> = est[..k].iter().map(|&(j, _)| j).collect();
    let p = est[..k].iter().map(|&(_, t)| t).fold(f64::NEG_INFINITY, f64::max);
    picked.sort_unstable();
    state.picked = Some(picked.clone());

    let empties = picked.len() >= state.remaining_count();
    if p < theta && !empties && allow_prune(&picked) {
        for &j in &picked {
            state.base[j] = false;
        }
        state.restart();
        return Ok(Decision::Pruned { picked, p });
    }
    if picked.len() > 1 {
        state.search_space = picked.clone();
        state.clear_records();
        Ok(Decision::Refined { picked, p })
    } else {
        state.clear_records();
        state.phase = Phase::Finished;
        Ok(Decision::LayerFinished { picked, p })
    }
}

pub fn refine_step(state: &mut LayerPruningState, theta: f64) -> Result<Decision> {
    refine_step_with(state, theta, |_| true)
}
