use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Mean and (biased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnForward<T = f32> {
    pub output: Tensor<T>,
    /// Statistics the output was normalized with.
    pub stats: BnStats,
    /// True when `stats` were computed from this batch, so gradients flow
    /// through them.
    pub batch_stats: bool,
    /// Number of values per channel.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

impl<T: Element> BnParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::from_f64(1.0)),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::from_f64(1.0)),
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<usize> {
        let c = self.gamma.len();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.len() != c {
                return Err(Error::Shape(format!(
                    "batch norm vectors disagree: {c} vs {}",
                    t.len()
                )));
            }
        }
        if self.running_var.data().iter().any(|v| v.to_f64() < 0.0) {
            return Err(Error::NegativeVariance);
        }
        Ok(c)
    }

    pub fn running_stats(&self) -> BnStats {
        BnStats { mean: self.running_mean.to_f64_vec(), var: self.running_var.to_f64_vec() }
    }

    /// Exponential moving average update from a batch's statistics.
    pub fn update_running(&mut self, stats: &BnStats, count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::from_f64(BN_MOMENTUM * r.to_f64() + (1.0 - BN_MOMENTUM) * m);
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::from_f64(BN_MOMENTUM * r.to_f64() + (1.0 - BN_MOMENTUM) * v * unbias);
        }
    }
}

fn batch_stats<T: Element>(input: &Tensor<T>, c: usize) -> BnStats {
    let count = input.len() / c;
    let mut mean = vec![0.0; c];
    for row in input.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in input.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    BnStats { mean, var }
}

/// Normalizes over every axis but the last.
///
/// Train mode uses the batch statistics; the caller folds them into the
/// running averages with [`BnParams::update_running`]. `stats_override`
/// replaces whatever statistics the mode would use and is treated as a
/// constant by the backward pass.
pub fn batchnorm_forward<T: Element>(
    input: &Tensor<T>,
    p: &BnParams<T>,
    mode: BnMode,
    stats_override: Option<&BnStats>,
) -> Result<BnForward<T>> {
    let c = p.validate()?;
    if input.channels() != c {
        return Err(Error::Shape(format!(
            "batchnorm: input has {} channels, parameters have {c}",
            input.channels()
        )));
    }
    let count = input.len() / c;
    let (stats, from_batch) = match (stats_override, mode) {
        (Some(s), _) => {
            if s.mean.len() != c || s.var.len() != c {
                return Err(Error::Shape("batchnorm: override statistics length".into()));
            }
            if s.var.iter().any(|&v| v < 0.0) {
                return Err(Error::NegativeVariance);
            }
            (s.clone(), false)
        }
        (None, BnMode::Train) => (batch_stats(input, c), true),
        (None, BnMode::Eval) => (p.running_stats(), false),
    };
    let gamma = p.gamma.to_f64_vec();
    let beta = p.beta.to_f64_vec();
    let scale: Vec<f64> = stats
        .var
        .iter()
        .zip(&gamma)
        .map(|(v, g)| g / (v + p.epsilon).sqrt())
        .collect();
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(c) {
        for k in 0..c {
            out.push(T::from_f64((row[k].to_f64() - stats.mean[k]) * scale[k] + beta[k]));
        }
    }
    let output = Tensor::new(input.shape().to_vec(), out)?.ensure_finite("batchnorm_forward")?;
    Ok(BnForward { output, stats, batch_stats: from_batch, count })
}

/// Gradients of `sum(grad_out * y)` for the forward pass that used `stats`.
pub fn batchnorm_backward<T: Element>(
    input: &Tensor<T>,
    p: &BnParams<T>,
    stats: &BnStats,
    batch_stats: bool,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let c = p.validate()?;
    if input.shape() != grad_out.shape() || input.channels() != c {
        return Err(Error::Shape(format!(
            "batchnorm_backward: input {:?}, grad {:?}, {c} channels",
            input.shape(),
            grad_out.shape()
        )));
    }
    let m = (input.len() / c) as f64;
    let gamma = p.gamma.to_f64_vec();
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();

    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (row, drow) in input.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for k in 0..c {
            let xhat = (row[k].to_f64() - stats.mean[k]) * inv_std[k];
            let dy = drow[k].to_f64();
            sum_dy[k] += dy;
            sum_dy_xhat[k] += dy * xhat;
        }
    }

    let mut dx = Vec::with_capacity(input.len());
    for (row, drow) in input.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for k in 0..c {
            let dy = drow[k].to_f64();
            let v = if batch_stats {
                let xhat = (row[k].to_f64() - stats.mean[k]) * inv_std[k];
                gamma[k] * inv_std[k] * (dy - sum_dy[k] / m - xhat * sum_dy_xhat[k] / m)
            } else {
                gamma[k] * inv_std[k] * dy
            };
            dx.push(T::from_f64(v));
        }
    }
    Ok(BnGrads {
        grad_input: Tensor::new(input.shape().to_vec(), dx)?.ensure_finite("batchnorm_backward")?,
        grad_gamma: Tensor::from_f64(vec![c], sum_dy_xhat)?,
        grad_beta: Tensor::from_f64(vec![c], sum_dy)?,
    })
}
