use std::collections::BTreeMap;

use super::{LayerGrads, LayerKind, LayerParams, ModelParams, Network, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward, BnMode, BnStats, Tensor,
};

/// Per-conv-layer channel multipliers applied at the layer's mask point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Masks {
    inner: BTreeMap<usize, Vec<f32>>,
}

impl Masks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, mask: Vec<f32>) {
        self.inner.insert(layer, mask);
    }

    pub fn insert_binary(&mut self, layer: usize, keep: &[bool]) {
        self.insert(layer, keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect());
    }

    pub fn remove(&mut self, layer: usize) -> Option<Vec<f32>> {
        self.inner.remove(&layer)
    }

    pub fn get(&self, layer: usize) -> Option<&[f32]> {
        self.inner.get(&layer).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.inner.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Number of nonzero entries of a layer's mask, if it has one.
    pub fn active(&self, layer: usize) -> Option<usize> {
        self.get(layer).map(|m| m.iter().filter(|&&v| v != 0.0).count())
    }
}

#[derive(Clone, Debug)]
pub struct BnRecord {
    pub stats: BnStats,
    pub batch_stats: bool,
    pub count: usize,
}

/// Everything the backward pass and the scoring paths need from a forward.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub input: Tensor,
    /// Output of every layer, after masking at mask points.
    pub outputs: Vec<Tensor>,
    pub bn: Vec<Option<BnRecord>>,
    pub mode: BnMode,
}

impl ForwardRecord {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("network has layers")
    }
}

#[derive(Clone, Debug)]
pub struct BackwardResult {
    pub params: ParamGrads,
    /// Gradient with respect to each layer's (masked) output.
    pub outputs: Vec<Option<Tensor>>,
}

/// Statistics used by batch norm layers on a re-run path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSource {
    /// Reuse the statistics recorded by the base forward pass.
    Base,
    /// Normalize the re-run input by its own statistics (train records only).
    Own,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

impl Network {
    pub fn check_masks(&self, masks: &Masks) -> Result<()> {
        for (layer, m) in masks.iter() {
            let Some(spec) = self.spec.layers.get(layer) else {
                return Err(Error::InvalidMask { layer, reason: "no such layer".into() });
            };
            if spec.kind != LayerKind::Conv {
                return Err(Error::InvalidMask { layer, reason: "masks apply to conv layers only".into() });
            }
            if m.len() != spec.width {
                return Err(Error::InvalidMask {
                    layer,
                    reason: format!("length {} differs from width {}", m.len(), spec.width),
                });
            }
        }
        Ok(())
    }

    fn expect_input(&self, input: &Tensor) -> Result<()> {
        let [h, w, c] = self.spec.input_shape;
        match *input.shape() {
            [_, ih, iw, ic] if (ih, iw, ic) == (h, w, c) => Ok(()),
            _ => Err(Error::Shape(format!(
                "network expects N x {h} x {w} x {c}, got {:?}",
                input.shape()
            ))),
        }
    }

    /// Runs a single layer on its inputs.
    fn apply(
        &self,
        id: usize,
        inputs: &[&Tensor],
        params: &ModelParams,
        mode: BnMode,
        bn_override: Option<&BnStats>,
    ) -> Result<(Tensor, Option<BnRecord>)> {
        let layer = &self.spec.layers[id];
        let x = inputs[0];
        let mismatch = || Error::Shape(format!("layer {id}: parameters do not match kind {:?}", layer.kind));
        Ok(match (layer.kind, &params.layers[id]) {
            (LayerKind::Conv, LayerParams::Conv(p)) => (conv2d_forward(x, p)?, None),
            (LayerKind::Bn, LayerParams::Bn(p)) => {
                let f = batchnorm_forward(x, p, mode, bn_override)?;
                let rec = BnRecord { stats: f.stats, batch_stats: f.batch_stats, count: f.count };
                (f.output, Some(rec))
            }
            (LayerKind::Fc, LayerParams::Fc(p)) => (fc_forward(x, p)?, None),
            (LayerKind::Relu, _) => (relu_forward(x), None),
            (LayerKind::Maxpool, _) => (maxpool2d_forward(x, layer.kernel, layer.stride)?, None),
            (LayerKind::Flatten, _) => {
                let n = x.shape()[0];
                let d = x.len() / n;
                (x.clone().reshape(vec![n, d])?, None)
            }
            (LayerKind::Add, _) => (x.add(inputs[1])?, None),
            _ => return Err(mismatch()),
        })
    }

    fn apply_mask(&self, id: usize, out: &mut Tensor, masks: Option<&Masks>) -> Result<()> {
        if let (Some(conv), Some(masks)) = (self.topo.masked_at[id], masks) {
            if let Some(m) = masks.get(conv) {
                out.scale_channels(m)?;
            }
        }
        Ok(())
    }

    /// Full forward pass over a batch `N x H x W x C`.
    ///
    /// Each masked conv's channels are multiplied by its mask at the end of
    /// its conv/BN/ReLU block, before any consumer sees them.
    pub fn forward(
        &self,
        params: &ModelParams,
        input: &Tensor,
        masks: Option<&Masks>,
        mode: BnMode,
    ) -> Result<ForwardRecord> {
        self.expect_input(input)?;
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        let n = self.spec.layers.len();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
        let mut bn = Vec::with_capacity(n);
        for (id, layer) in self.spec.layers.iter().enumerate() {
            let inputs: Vec<&Tensor> = if layer.predecessors.is_empty() {
                vec![input]
            } else {
                layer.predecessors.iter().map(|&p| &outputs[p]).collect()
            };
            let (mut out, rec) = self.apply(id, &inputs, params, mode, None)?;
            self.apply_mask(id, &mut out, masks)?;
            outputs.push(out);
            bn.push(rec);
        }
        Ok(ForwardRecord { input: input.clone(), outputs, bn, mode })
    }

    /// Logits only, in eval mode.
    pub fn predict(&self, params: &ModelParams, input: &Tensor, masks: Option<&Masks>) -> Result<Tensor> {
        let mut rec = self.forward(params, input, masks, BnMode::Eval)?;
        Ok(rec.outputs.pop().expect("network has layers"))
    }

    /// Re-runs a linear chain of layers starting from `input`.
    ///
    /// Every layer on `path` must have a single predecessor, the previous
    /// element (or the layer that produced `input`). Batch norm statistics
    /// come from `record` according to `bn_source`; masks of convs whose
    /// mask point lies on the path are applied.
    pub fn run_path(
        &self,
        params: &ModelParams,
        input: Tensor,
        path: &[usize],
        record: &ForwardRecord,
        masks: Option<&Masks>,
        bn_source: BnSource,
    ) -> Result<Tensor> {
        let mut cur = input;
        for &id in path {
            let layer = &self.spec.layers[id];
            if layer.predecessors.len() != 1 {
                return Err(Error::InvalidSpec(format!("layer {id} is not on a linear path")));
            }
            let over = match (bn_source, &record.bn[id]) {
                (BnSource::Base, Some(r)) => Some(&r.stats),
                _ => None,
            };
            let (mut out, _) = self.apply(id, &[&cur], params, record.mode, over)?;
            self.apply_mask(id, &mut out, masks)?;
            cur = out;
        }
        Ok(cur)
    }

    /// Backpropagates `grad_logits` through the recorded forward pass.
    pub fn backward(
        &self,
        params: &ModelParams,
        record: &ForwardRecord,
        grad_logits: Tensor,
        masks: Option<&Masks>,
    ) -> Result<BackwardResult> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut out_grads: Vec<Option<Tensor>> = vec![None; n];
        let mut param_grads = vec![LayerGrads::None; n];
        grads[n - 1] = Some(grad_logits);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let layer = &self.spec.layers[id];
            let mut g_raw = g.clone();
            self.apply_mask(id, &mut g_raw, masks)?;
            out_grads[id] = Some(g);
            let input_of = |k: usize| -> &Tensor {
                match layer.predecessors.get(k) {
                    Some(&p) => &record.outputs[p],
                    None => &record.input,
                }
            };
            let x = input_of(0);
            let mismatch = || Error::Shape(format!("layer {id}: parameters do not match kind"));
            let grad_in: Vec<Tensor> = match (layer.kind, &params.layers[id]) {
                (LayerKind::Conv, LayerParams::Conv(p)) => {
                    let cg = conv2d_backward(x, p, &g_raw)?;
                    param_grads[id] = LayerGrads::Conv { kernel: cg.grad_kernel, bias: cg.grad_bias };
                    vec![cg.grad_input]
                }
                (LayerKind::Bn, LayerParams::Bn(p)) => {
                    let rec = record.bn[id].as_ref().ok_or_else(mismatch)?;
                    let bg = batchnorm_backward(x, p, &rec.stats, rec.batch_stats, &g_raw)?;
                    param_grads[id] = LayerGrads::Bn { gamma: bg.grad_gamma, beta: bg.grad_beta };
                    vec![bg.grad_input]
                }
                (LayerKind::Fc, LayerParams::Fc(p)) => {
                    let fg = fc_backward(x, p, &g_raw)?;
                    param_grads[id] = LayerGrads::Fc { weight: fg.grad_weight, bias: fg.grad_bias };
                    vec![fg.grad_input]
                }
                (LayerKind::Relu, _) => vec![relu_backward(x, &g_raw)?],
                (LayerKind::Maxpool, _) => vec![maxpool2d_backward(x, layer.kernel, layer.stride, &g_raw)?],
                (LayerKind::Flatten, _) => vec![g_raw.reshape(x.shape().to_vec())?],
                (LayerKind::Add, _) => vec![g_raw.clone(), g_raw],
                _ => return Err(mismatch()),
            };
            for (k, gi) in grad_in.into_iter().enumerate() {
                if let Some(&p) = layer.predecessors.get(k) {
                    accumulate(&mut grads[p], gi)?;
                }
            }
        }
        Ok(BackwardResult { params: ParamGrads { layers: param_grads }, outputs: out_grads })
    }
}
