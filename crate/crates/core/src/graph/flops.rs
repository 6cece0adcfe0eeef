//! Multiply-accumulate counting.
//!
//! One multiply-accumulate is one FLOP: a conv layer costs
//! `H_out * W_out * r * s * c_in * c_out`, an fc layer `c_in * c_out`.

use super::{FeatureShape, LayerKind, Masks, NetworkSpec};
use crate::error::Result;

/// Per-layer cost with conv/fc widths given by `widths[layer]`.
fn per_layer(spec: &NetworkSpec, widths: &[usize]) -> Result<Vec<u64>> {
    let shapes = spec.infer_shapes(|l| widths[l.id])?;
    let [h0, w0, c0] = spec.input_shape;
    let input = FeatureShape::Spatial { h: h0, w: w0, c: c0 };
    Ok(spec
        .layers
        .iter()
        .map(|l| {
            let in_shape = l.predecessors.first().map_or(input, |&p| shapes[p]);
            match (l.kind, shapes[l.id]) {
                (LayerKind::Conv, FeatureShape::Spatial { h, w, c }) => {
                    (h * w * l.kernel * l.kernel * in_shape.channels() * c) as u64
                }
                (LayerKind::Fc, out) => (in_shape.numel() * out.channels()) as u64,
                _ => 0,
            }
        })
        .collect())
}

pub fn layer_flops(spec: &NetworkSpec) -> Result<Vec<u64>> {
    let widths: Vec<usize> = spec.layers.iter().map(|l| l.width).collect();
    per_layer(spec, &widths)
}

pub fn flops_of(spec: &NetworkSpec) -> Result<u64> {
    Ok(layer_flops(spec)?.iter().sum())
}

/// FLOPs when conv/fc layer `i` has `widths[i]` output channels.
pub fn flops_with_widths(spec: &NetworkSpec, widths: &[usize]) -> Result<u64> {
    Ok(per_layer(spec, widths)?.iter().sum())
}

/// Widths with every masked conv counted by its number of nonzero mask bits.
pub fn effective_widths(spec: &NetworkSpec, masks: &Masks) -> Vec<usize> {
    spec.layers
        .iter()
        .map(|l| masks.active(l.id).unwrap_or(l.width))
        .collect()
}

/// FLOPs of the architecture the masks describe.
pub fn effective_flops(spec: &NetworkSpec, masks: &Masks) -> Result<u64> {
    flops_with_widths(spec, &effective_widths(spec, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_vgg_cifar, SpecBuilder, VGG16_CIFAR_WIDTHS};

    #[test]
    fn single_unit_conv_is_one_flop() {
        let mut b = SpecBuilder::new([1, 1, 1], 1);
        let c = b.conv(None, 1, 1, 1, 0);
        let f = b.flatten(c);
        b.fc(f, 1);
        let spec = b.finish().unwrap();
        let per = layer_flops(&spec).unwrap();
        assert_eq!(per[c], 1);
    }

    #[test]
    fn halving_two_stacked_convs_quarters_the_second() {
        let build = |w: usize| {
            let mut b = SpecBuilder::new([8, 8, 3], 2);
            let c1 = b.conv(None, w, 3, 1, 1);
            let c2 = b.conv(Some(c1), w, 3, 1, 1);
            let f = b.flatten(c2);
            b.fc(f, 2);
            (b.finish().unwrap(), c2)
        };
        let (full, c2) = build(16);
        let (half, _) = build(8);
        let a = layer_flops(&full).unwrap()[c2];
        let b = layer_flops(&half).unwrap()[c2];
        assert_eq!(b * 4, a);
    }

    #[test]
    fn vgg16_cifar_is_313m() {
        let spec = build_vgg_cifar(&VGG16_CIFAR_WIDTHS).unwrap();
        let f = flops_of(&spec).unwrap() as f64;
        assert!((f / 313e6 - 1.0).abs() <= 0.01, "{f}");
    }

    #[test]
    fn masks_reduce_effective_flops() {
        let spec = build_vgg_cifar(&VGG16_CIFAR_WIDTHS).unwrap();
        let mut masks = Masks::new();
        let mut m = vec![1.0; 64];
        m[0] = 0.0;
        masks.insert(0, m);
        assert!(effective_flops(&spec, &masks).unwrap() < flops_of(&spec).unwrap());
    }
}
