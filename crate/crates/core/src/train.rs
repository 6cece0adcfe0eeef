//! SGD training, finetuning and evaluation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ForwardRecord, LayerGrads, LayerParams, Masks, ModelParams, Network, ParamGrads};
use crate::tensor::{softmax_xent, BnMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `(step, lr)` pairs; each rate holds from its step until the next.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(1500, 0)
    }
}

impl TrainConfig {
    /// lr 0.05, divided by ten at half and at three quarters of the run.
    pub fn desk(max_steps: usize, seed: u64) -> Self {
        Self {
            batch_size: 32,
            lr_schedule: vec![(0, 0.05), (max_steps / 2, 0.005), (max_steps * 3 / 4, 0.0005)],
            momentum: 0.9,
            weight_decay: 5e-4,
            max_steps,
            seed,
        }
    }

    /// Constant learning rate, no weight decay.
    pub fn constant(lr: f64, max_steps: usize, seed: u64) -> Self {
        Self { lr_schedule: vec![(0, lr)], weight_decay: 0.0, ..Self::desk(max_steps, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch size and max steps must be positive".into()));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr schedule must be non-empty with strictly increasing steps".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(s, _)| s <= step)
            .last()
            .unwrap_or(&self.lr_schedule[0])
            .1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

pub fn write_step_csv(rows: &[StepLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,loss,top1")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.top1)?;
    }
    Ok(())
}

/// SGD with classical momentum: `v <- m v + g + wd w`, `w <- w - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamGrads,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: ParamGrads::zeros_like(params) }
    }

    pub fn velocity(&self) -> &ParamGrads {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut ParamGrads {
        &mut self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Shape("gradient and parameter layer counts differ".into()));
        }
        for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(self.velocity.layers.iter_mut()) {
            if matches!(g, LayerGrads::None) {
                continue;
            }
            for ((w, g), v) in p.trainable_mut().into_iter().zip(g.tensors()).zip(v.tensors_mut()) {
                if w.shape() != g.shape() {
                    return Err(Error::Shape(format!("gradient {:?} vs parameter {:?}", g.shape(), w.shape())));
                }
                for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    let d = g as f64 + self.weight_decay * *w as f64;
                    let vel = if self.momentum == 0.0 { d } else { self.momentum * *v as f64 + d };
                    *v = vel as f32;
                    *w = (*w as f64 - lr * vel) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Folds the batch statistics of a train-mode forward into the running stats.
pub fn update_bn_running(params: &mut ModelParams, record: &ForwardRecord) {
    for (p, rec) in params.layers.iter_mut().zip(&record.bn) {
        if let (LayerParams::Bn(bn), Some(rec)) = (p, rec) {
            if rec.batch_stats {
                bn.update_running(&rec.stats, rec.count);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub record: ForwardRecord,
    pub grads: ParamGrads,
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
        e => e,
    }
}

/// Train-mode forward and backward on one batch, without updating anything.
pub fn compute_gradients(
    net: &Network,
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    masks: Option<&Masks>,
) -> Result<StepOutput> {
    let record = net.forward(params, images, masks, BnMode::Train)?;
    let xent = softmax_xent(record.logits(), labels)?;
    let back = net.backward(params, &record, xent.grad_logits, masks)?;
    Ok(StepOutput { loss: xent.mean_loss, correct: xent.correct, record, grads: back.params })
}

/// One SGD update on one batch; returns the batch loss and correct count.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &Network,
    params: &mut ModelParams,
    sgd: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    masks: Option<&Masks>,
    lr: f64,
    step: usize,
) -> Result<StepOutput> {
    let out = compute_gradients(net, params, images, labels, masks).map_err(|e| diverged(step, e))?;
    if !out.loss.is_finite() {
        return Err(Error::Diverged { step, loss: out.loss });
    }
    update_bn_running(params, &out.record);
    sgd.step(params, &out.grads, lr)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
    pub steps: usize,
    /// Batch sampler generator after the last step.
    pub rng: ChaCha8Rng,
}

/// Trains from `params` or, if `None`, from a fresh initialization drawn
/// from `cfg.seed`.
pub fn train(net: &Network, params: Option<ModelParams>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = match params {
        Some(p) => p,
        None => ModelParams::init(net.spec(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    params.check(net.spec(), net.topology())?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler_rng.set_stream(1);
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, sampler_rng)?;
    let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let (images, labels) = data.batch(&sampler.next_indices())?;
        let lr = cfg.lr_at(step);
        let out = train_step(net, &mut params, &mut sgd, &images, &labels, None, lr, step)?;
        log.push(StepLog { step, lr, loss: out.loss, top1: out.correct as f64 / labels.len() as f64 });
    }
    Ok(TrainOutcome { params, log, steps: cfg.max_steps, rng: sampler.rng().clone() })
}

/// Continues training existing parameters.
pub fn finetune(net: &Network, params: ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(net, Some(params), data, cfg)
}

pub const EVAL_CHUNK: usize = 256;

/// Eval-mode accuracy and mean loss; optionally under masks.
pub fn evaluate(net: &Network, params: &ModelParams, data: &Dataset, masks: Option<&Masks>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let (images, labels) = chunk?;
        let logits = net.predict(params, &images, masks)?;
        let x = softmax_xent(&logits, &labels)?;
        loss += x.per_example.iter().sum::<f64>();
        correct += x.correct;
    }
    let n = data.len();
    Ok(EvalReport { top1: correct as f64 / n as f64, loss: loss / n as f64, count: n })
}
