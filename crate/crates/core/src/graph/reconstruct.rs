use std::collections::BTreeMap;

use super::{FeatureShape, LayerKind, LayerParams, Masks, ModelParams, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Keeps indices `keep` along `axis`.
fn slice_axis<T: Element>(t: &Tensor<T>, axis: usize, keep: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * extent + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(new_shape, data)
}

/// Slims every masked conv layer down to its surviving filters.
///
/// For a conv layer with remaining set `R = {j | u_j = 1}` the kernel and
/// bias keep the output channels in `R`, the BN layer of its block is sliced
/// the same way, and the successor layer keeps only the matching input
/// channels (for an fc successor, the matching rows at every flattened
/// position). The result computes exactly what the masked network computes.
pub fn reconstruct(net: &Network, params: &ModelParams, base_masks: &Masks) -> Result<(NetworkSpec, ModelParams)> {
    net.check_masks(base_masks)?;
    let topo = net.topology();
    let mut remaining: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (layer, mask) in base_masks.iter() {
        if !net.layer(layer).prunable {
            return Err(Error::InvalidMask { layer, reason: "layer is not prunable".into() });
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidMask { layer, reason: "base masks must be binary".into() });
        }
        let keep: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == 1.0).collect();
        if keep.is_empty() {
            return Err(Error::EmptyRemainingSet(layer));
        }
        if keep.len() < mask.len() {
            remaining.insert(layer, keep);
        }
    }

    let mut spec = net.spec().clone();
    let mut new_params = params.clone();
    for (&layer, keep) in &remaining {
        spec.layers[layer].width = keep.len();
        let conv = new_params
            .conv_mut(layer)
            .ok_or_else(|| Error::Shape(format!("layer {layer} has no conv parameters")))?;
        conv.kernel = slice_axis(&conv.kernel, 3, keep)?;
        conv.bias = slice_axis(&conv.bias, 0, keep)?;

        let point = topo.mask_point[layer].expect("conv layers have a mask point");
        let mut cur = layer;
        while cur != point {
            cur = topo.consumers[cur][0];
            if let Some(bn) = new_params.bn_mut(cur) {
                bn.gamma = slice_axis(&bn.gamma, 0, keep)?;
                bn.beta = slice_axis(&bn.beta, 0, keep)?;
                bn.running_mean = slice_axis(&bn.running_mean, 0, keep)?;
                bn.running_var = slice_axis(&bn.running_var, 0, keep)?;
            }
        }

        let succ = topo.successor[layer].as_ref().expect("prunable layers have a successor");
        match &mut new_params.layers[succ.layer] {
            LayerParams::Conv(c) => c.kernel = slice_axis(&c.kernel, 2, keep)?,
            LayerParams::Fc(f) => {
                let flatten = succ
                    .path
                    .iter()
                    .find(|&&id| net.layer(id).kind == LayerKind::Flatten)
                    .ok_or_else(|| Error::InvalidSpec(format!("no flatten between layer {layer} and its fc successor")))?;
                let pre = net.layer(*flatten).predecessors[0];
                let FeatureShape::Spatial { h, w, c } = topo.shapes[pre] else {
                    return Err(Error::InvalidSpec("flatten input is not spatial".into()));
                };
                let rows: Vec<usize> = (0..h * w).flat_map(|pos| keep.iter().map(move |&k| pos * c + k)).collect();
                f.weight = slice_axis(&f.weight, 0, &rows)?;
            }
            _ => return Err(Error::InvalidSpec(format!("successor of layer {layer} has no weights"))),
        }
    }
    let new_net = Network::new(spec)?;
    new_params.check(new_net.spec(), new_net.topology())?;
    Ok((new_net.spec().clone(), new_params))
}
