use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerKind, NetworkSpec, Topology};
use crate::error::{Error, Result};
use crate::tensor::{BnParams, ConvParams, FcParams, Tensor};

/// Parameters owned by one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Conv(ConvParams),
    Bn(BnParams),
    Fc(FcParams),
}

/// All parameters of a network, indexed by layer id.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

/// Gradients (or optimizer state) shaped like the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    None,
    Conv { kernel: Tensor, bias: Tensor },
    Bn { gamma: Tensor, beta: Tensor },
    Fc { weight: Tensor, bias: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl LayerGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Conv { kernel, bias } => vec![kernel, bias],
            LayerGrads::Bn { gamma, beta } => vec![gamma, beta],
            LayerGrads::Fc { weight, bias } => vec![weight, bias],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Conv { kernel, bias } => vec![kernel, bias],
            LayerGrads::Bn { gamma, beta } => vec![gamma, beta],
            LayerGrads::Fc { weight, bias } => vec![weight, bias],
        }
    }
}

impl ParamGrads {
    /// All-zero gradients matching `params`.
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerGrads::None,
                LayerParams::Conv(c) => LayerGrads::Conv {
                    kernel: Tensor::zeros(c.kernel.shape()),
                    bias: Tensor::zeros(c.bias.shape()),
                },
                LayerParams::Bn(b) => LayerGrads::Bn {
                    gamma: Tensor::zeros(b.gamma.shape()),
                    beta: Tensor::zeros(b.beta.shape()),
                },
                LayerParams::Fc(f) => LayerGrads::Fc {
                    weight: Tensor::zeros(f.weight.shape()),
                    bias: Tensor::zeros(f.bias.shape()),
                },
            })
            .collect();
        Self { layers }
    }
}

impl LayerParams {
    /// Trainable tensors, in the same order as [`LayerGrads::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(c) => vec![&mut c.kernel, &mut c.bias],
            LayerParams::Bn(b) => vec![&mut b.gamma, &mut b.beta],
            LayerParams::Fc(f) => vec![&mut f.weight, &mut f.bias],
        }
    }

    /// Every stored tensor with its name suffix, trainable or not.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(c) => vec![("kernel", &c.kernel), ("bias", &c.bias)],
            LayerParams::Bn(b) => vec![
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ],
            LayerParams::Fc(f) => vec![("weight", &f.weight), ("bias", &f.bias)],
        }
    }
}

/// Expected parameter tensor shapes of every layer, by name suffix.
pub(crate) fn expected_shapes(spec: &NetworkSpec, topo: &Topology) -> Vec<Vec<(&'static str, Vec<usize>)>> {
    let [_, _, c0] = spec.input_shape;
    spec.layers
        .iter()
        .map(|l| {
            let in_ch = l.predecessors.first().map_or(c0, |&p| topo.shapes[p].channels());
            match l.kind {
                LayerKind::Conv => vec![
                    ("kernel", vec![l.kernel, l.kernel, in_ch, l.width]),
                    ("bias", vec![l.width]),
                ],
                LayerKind::Bn => ["gamma", "beta", "running_mean", "running_var"]
                    .into_iter()
                    .map(|n| (n, vec![in_ch]))
                    .collect(),
                LayerKind::Fc => vec![("weight", vec![in_ch, l.width]), ("bias", vec![l.width])],
                _ => vec![],
            }
        })
        .collect()
}

impl ModelParams {
    /// He-normal kernels, zero biases, identity batch norm.
    pub fn init(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let topo = spec.topology()?;
        let shapes = expected_shapes(spec, &topo);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, expect) in spec.layers.iter().zip(&shapes) {
            let he = |shape: &[usize], fan_in: usize, rng: &mut dyn rand::RngCore| {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                Tensor::from_f64(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
            };
            let p = match l.kind {
                LayerKind::Conv => {
                    let ks = &expect[0].1;
                    LayerParams::Conv(ConvParams {
                        kernel: he(ks, ks[0] * ks[1] * ks[2], rng)?,
                        bias: Tensor::zeros(&[l.width]),
                        stride: l.stride,
                        padding: l.padding,
                    })
                }
                LayerKind::Bn => LayerParams::Bn(BnParams::identity(expect[0].1[0])),
                LayerKind::Fc => {
                    let ws = &expect[0].1;
                    LayerParams::Fc(FcParams { weight: he(ws, ws[0], rng)?, bias: Tensor::zeros(&[l.width]) })
                }
                _ => LayerParams::None,
            };
            layers.push(p);
        }
        Ok(Self { layers })
    }

    /// Checks every tensor against the shapes the spec implies.
    pub fn check(&self, spec: &NetworkSpec, topo: &Topology) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter entries for {} layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (p, expect)) in self.layers.iter().zip(expected_shapes(spec, topo)).enumerate() {
            let named = p.named();
            if named.len() != expect.len() {
                return Err(Error::Shape(format!("layer {i}: parameter kind does not match spec")));
            }
            for ((name, t), (ename, eshape)) in named.iter().zip(&expect) {
                if name != ename || t.shape() != eshape.as_slice() {
                    return Err(Error::Shape(format!(
                        "layer {i}.{name}: shape {:?}, spec implies {eshape:?}",
                        t.shape()
                    )));
                }
            }
            if let LayerParams::Conv(c) = p {
                let l = &spec.layers[i];
                if c.stride != l.stride || c.padding != l.padding {
                    return Err(Error::Shape(format!("layer {i}: conv geometry differs from spec")));
                }
            }
        }
        Ok(())
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvParams> {
        match self.layers.get(layer) {
            Some(LayerParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, layer: usize) -> Option<&mut ConvParams> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, layer: usize) -> Option<&mut BnParams> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Bn(b)) => Some(b),
            _ => None,
        }
    }

    /// `layer{id}.{name}` for every stored tensor, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.named().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    /// Rebuilds parameters from named tensors, taking geometry from `spec`.
    pub fn from_named(spec: &NetworkSpec, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |i: usize, name: &str| {
            tensors
                .remove(&format!("layer{i}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor layer{i}.{name}")))
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let i = l.id;
            layers.push(match l.kind {
                LayerKind::Conv => LayerParams::Conv(ConvParams {
                    kernel: take(i, "kernel")?,
                    bias: take(i, "bias")?,
                    stride: l.stride,
                    padding: l.padding,
                }),
                LayerKind::Bn => LayerParams::Bn(BnParams {
                    gamma: take(i, "gamma")?,
                    beta: take(i, "beta")?,
                    running_mean: take(i, "running_mean")?,
                    running_var: take(i, "running_var")?,
                    epsilon: crate::tensor::BN_EPSILON,
                }),
                LayerKind::Fc => LayerParams::Fc(FcParams { weight: take(i, "weight")?, bias: take(i, "bias")? }),
                _ => LayerParams::None,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("tensor {extra} has no matching layer")));
        }
        Ok(Self { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{vgg_small, VGG_SMALL_WIDTHS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_matches_spec_shapes() {
        let spec = vgg_small([16, 16, 3], 5, &VGG_SMALL_WIDTHS).unwrap();
        let topo = spec.topology().unwrap();
        let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.check(&spec, &topo).unwrap();
    }

    #[test]
    fn named_round_trip() {
        let spec = vgg_small([16, 16, 3], 5, &VGG_SMALL_WIDTHS).unwrap();
        let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let map = params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(&spec, map).unwrap(), params);
    }
}
