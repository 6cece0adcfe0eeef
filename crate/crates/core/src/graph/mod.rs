//! Architecture description, parameter storage and execution of layer graphs.
//!
//! A [`NetworkSpec`] is an ordered list of layers whose predecessors always
//! precede them. [`Network`] pairs a validated spec with its derived
//! [`Topology`]: output shapes, consumer lists, the point where each conv
//! layer's filter mask is applied, and the successor weighted layer that sees
//! the conv's output.

mod builders;
mod exec;
mod flops;
mod params;
mod reconstruct;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builders::{
    build_small_resnet, build_three_conv, build_vgg, build_vgg_cifar, scale_widths, vgg_small, ResNetConfig,
    SpecBuilder, VggConfig, VGG16_CIFAR_WIDTHS, VGG16_REDESIGNED_WIDTHS, VGG_SMALL_WIDTHS,
};
pub use exec::{BackwardResult, BnRecord, BnSource, ForwardRecord, Masks};
pub use flops::{effective_flops, effective_widths, flops_of, flops_with_widths, layer_flops};
pub use params::{LayerGrads, LayerParams, ModelParams, ParamGrads};
pub use reconstruct::reconstruct;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Bn,
    Relu,
    Maxpool,
    Fc,
    Add,
    Flatten,
}

fn default_stride() -> usize {
    1
}

/// One node of the layer graph.
///
/// `width` is the output channel count of conv and fc layers and zero
/// elsewhere. `kernel`, `stride` and `padding` describe conv and pooling
/// windows. An empty predecessor list means the layer reads the network input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub predecessors: Vec<usize>,
    #[serde(default)]
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// `[h, w, c]` of a single example.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn channels(&self) -> usize {
        match *self {
            FeatureShape::Spatial { c, .. } => c,
            FeatureShape::Flat(d) => d,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial { h, w, c } => h * w * c,
            FeatureShape::Flat(d) => d,
        }
    }

    /// Tensor shape for a batch of `n`.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            FeatureShape::Spatial { h, w, c } => vec![n, h, w, c],
            FeatureShape::Flat(d) => vec![n, d],
        }
    }
}

/// Where a conv layer's output meets the next weighted layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Successor {
    /// Next conv or fc layer.
    pub layer: usize,
    /// Layers run after the mask point, ending at `output_point`. Contains
    /// any pooling/flatten nodes, the successor itself and its BN/ReLU block.
    pub path: Vec<usize>,
    /// Layer whose output is the successor block's feature map.
    pub output_point: usize,
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub shapes: Vec<FeatureShape>,
    pub consumers: Vec<Vec<usize>>,
    /// For conv layers: the end of the conv -> [bn] -> [relu] block, where the
    /// filter mask multiplies the channels.
    pub mask_point: Vec<Option<usize>>,
    /// Inverse of `mask_point`: the conv whose mask applies at this layer.
    pub masked_at: Vec<Option<usize>>,
    /// For conv layers with a single downstream weighted layer.
    pub successor: Vec<Option<Successor>>,
}

impl NetworkSpec {
    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv)
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.id).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Output shape of every layer, with conv/fc widths supplied by
    /// `width_of`. Zero widths are allowed here so masked widths can be
    /// counted.
    pub(crate) fn infer_shapes(&self, width_of: impl Fn(&LayerSpec) -> usize) -> Result<Vec<FeatureShape>> {
        let [h0, w0, c0] = self.input_shape;
        let input = FeatureShape::Spatial { h: h0, w: w0, c: c0 };
        let mut shapes: Vec<FeatureShape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidSpec(format!("layer {i} ({:?}): {msg}", layer.kind));
            if layer.id != i {
                return Err(bad(format!("id {} does not match position", layer.id)));
            }
            if let Some(&p) = layer.predecessors.iter().find(|&&p| p >= i) {
                return Err(bad(format!("predecessor {p} does not precede it")));
            }
            let arity = if layer.kind == LayerKind::Add { 2 } else { 1 };
            if !layer.predecessors.is_empty() && layer.predecessors.len() != arity {
                return Err(bad(format!("expects {arity} predecessors")));
            }
            if layer.predecessors.is_empty() && layer.kind == LayerKind::Add {
                return Err(bad("add needs two predecessors".into()));
            }
            let ins: Vec<FeatureShape> = if layer.predecessors.is_empty() {
                vec![input]
            } else {
                layer.predecessors.iter().map(|&p| shapes[p]).collect()
            };
            let shape = match (layer.kind, ins[0]) {
                (LayerKind::Conv, FeatureShape::Spatial { h, w, .. }) => {
                    let ext = |x| crate::tensor::conv_output_extent(x, layer.kernel, layer.stride, layer.padding);
                    match (layer.kernel > 0, ext(h), ext(w)) {
                        (true, Some(ho), Some(wo)) => FeatureShape::Spatial { h: ho, w: wo, c: width_of(layer) },
                        _ => return Err(bad(format!("kernel {} does not fit {h}x{w}", layer.kernel))),
                    }
                }
                (LayerKind::Maxpool, FeatureShape::Spatial { h, w, c }) => {
                    let ext = |x| crate::tensor::conv_output_extent(x, layer.kernel, layer.stride, 0);
                    match (layer.kernel > 0, ext(h), ext(w)) {
                        (true, Some(ho), Some(wo)) => FeatureShape::Spatial { h: ho, w: wo, c },
                        _ => return Err(bad(format!("window {} does not fit {h}x{w}", layer.kernel))),
                    }
                }
                (LayerKind::Fc, FeatureShape::Flat(_)) => FeatureShape::Flat(width_of(layer)),
                (LayerKind::Flatten, s) => FeatureShape::Flat(s.numel()),
                (LayerKind::Bn | LayerKind::Relu, s) => s,
                (LayerKind::Add, s) => {
                    if ins[1] != s {
                        return Err(bad(format!("residual inputs differ: {s:?} vs {:?}", ins[1])));
                    }
                    s
                }
                (_, s) => return Err(bad(format!("cannot consume {s:?}"))),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Validates the spec and derives its topology.
    pub fn topology(&self) -> Result<Topology> {
        for l in &self.layers {
            if matches!(l.kind, LayerKind::Conv | LayerKind::Fc) && l.width == 0 {
                return Err(Error::InvalidSpec(format!("layer {} has zero width", l.id)));
            }
        }
        if self.input_shape.iter().any(|&d| d == 0) || self.classes == 0 {
            return Err(Error::InvalidSpec("input shape and class count must be positive".into()));
        }
        let shapes = self.infer_shapes(|l| l.width)?;
        match shapes.last() {
            Some(FeatureShape::Flat(d)) if *d == self.classes => {}
            other => {
                return Err(Error::InvalidSpec(format!(
                    "last layer must emit {} logits, emits {other:?}",
                    self.classes
                )))
            }
        }
        let n = self.layers.len();
        let mut consumers = vec![Vec::new(); n];
        for l in &self.layers {
            for &p in &l.predecessors {
                consumers[p].push(l.id);
            }
        }
        let block_end = |start: usize| {
            let mut end = start;
            for want in [LayerKind::Bn, LayerKind::Relu] {
                if let [next] = consumers[end][..] {
                    if self.layers[next].kind == want {
                        end = next;
                    }
                }
            }
            end
        };
        let mut mask_point = vec![None; n];
        let mut masked_at = vec![None; n];
        let mut successor = vec![None; n];
        for l in self.conv_layers() {
            let end = block_end(l.id);
            mask_point[l.id] = Some(end);
            masked_at[end] = Some(l.id);
            let mut path = Vec::new();
            let mut cur = end;
            let found = loop {
                let [next] = consumers[cur][..] else { break None };
                match self.layers[next].kind {
                    LayerKind::Conv | LayerKind::Fc => break Some(next),
                    LayerKind::Maxpool | LayerKind::Flatten | LayerKind::Relu => {
                        path.push(next);
                        cur = next;
                    }
                    LayerKind::Bn | LayerKind::Add => break None,
                }
            };
            if let Some(next) = found {
                let out = block_end(next);
                let mut walk = next;
                path.push(walk);
                while walk != out {
                    walk = consumers[walk][0];
                    path.push(walk);
                }
                successor[l.id] = Some(Successor { layer: next, path, output_point: out });
            }
        }
        for l in &self.layers {
            if l.prunable && (l.kind != LayerKind::Conv || successor[l.id].is_none()) {
                return Err(Error::InvalidSpec(format!(
                    "layer {} is marked prunable but has no single successor layer",
                    l.id
                )));
            }
        }
        Ok(Topology { shapes, consumers, mask_point, masked_at, successor })
    }
}

/// A validated spec together with its topology.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    topo: Topology,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let topo = spec.topology()?;
        Ok(Self { spec, topo })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn layer(&self, id: usize) -> &LayerSpec {
        &self.spec.layers[id]
    }

    pub fn output_layer(&self) -> usize {
        self.spec.layers.len() - 1
    }

    pub fn width(&self, id: usize) -> usize {
        self.spec.layers[id].width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_spec() {
        let spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        let back = NetworkSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn json_uses_documented_field_names() {
        let spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        let v: serde_json::Value = serde_json::from_str(&spec.to_json().unwrap()).unwrap();
        let first = &v["layers"][0];
        for key in ["id", "kind", "width", "stride", "padding", "predecessors", "prunable"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["kind"], "conv");
        assert!(v.get("input_shape").is_some() && v.get("classes").is_some());
    }

    #[test]
    fn rejects_forward_reference_and_zero_width() {
        let mut spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        spec.layers[1].predecessors = vec![2];
        assert!(spec.topology().is_err());
        let mut spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        spec.layers[0].width = 0;
        assert!(spec.topology().is_err());
    }

    #[test]
    fn prunable_flag_on_residual_output_is_rejected() {
        let cfg = ResNetConfig { input_shape: [8, 8, 3], classes: 3, stage_widths: vec![4, 8, 8], blocks_per_stage: 1 };
        let mut spec = build_small_resnet(&cfg).unwrap();
        let stem = spec.layers.iter().position(|l| l.kind == LayerKind::Conv).unwrap();
        spec.layers[stem].prunable = true;
        assert!(matches!(spec.topology(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn vgg_successors_walk_through_pooling() {
        let spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        let topo = spec.topology().unwrap();
        let convs: Vec<usize> = spec.conv_layers().map(|l| l.id).collect();
        // second conv is followed by pooling before the third conv
        let succ = topo.successor[convs[1]].as_ref().unwrap();
        assert_eq!(succ.layer, convs[2]);
        assert_eq!(spec.layers[succ.path[0]].kind, LayerKind::Maxpool);
        // last conv feeds the classifier
        let last = topo.successor[*convs.last().unwrap()].as_ref().unwrap();
        assert_eq!(spec.layers[last.layer].kind, LayerKind::Fc);
    }
}
