use super::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

/// Conv widths of the CIFAR VGG-16 variant (13 conv layers).
pub const VGG16_CIFAR_WIDTHS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Widths found by scaling VGG-16 by 1.5x and pruning back to the original
/// budget.
pub const VGG16_REDESIGNED_WIDTHS: [usize; 13] = [44, 80, 160, 180, 360, 360, 256, 224, 192, 56, 80, 192, 192];

/// Default widths of the 8-conv desk-scale VGG.
pub const VGG_SMALL_WIDTHS: [usize; 8] = [16, 16, 32, 32, 48, 48, 64, 64];

/// Incremental construction of a [`NetworkSpec`].
///
/// `None` as a predecessor means the network input. [`SpecBuilder::finish`]
/// marks every conv layer that has a single successor weighted layer as
/// prunable, which excludes convs whose output feeds a residual add.
#[derive(Clone, Debug)]
pub struct SpecBuilder {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    classes: usize,
}

impl SpecBuilder {
    pub fn new(input_shape: [usize; 3], classes: usize) -> Self {
        Self { layers: Vec::new(), input_shape, classes }
    }

    fn push(&mut self, kind: LayerKind, preds: Vec<usize>, width: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let id = self.layers.len();
        self.layers.push(LayerSpec { id, kind, width, kernel, stride, padding, predecessors: preds, prunable: false });
        id
    }

    pub fn conv(&mut self, pred: Option<usize>, width: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        self.push(LayerKind::Conv, pred.into_iter().collect(), width, kernel, stride, padding)
    }

    pub fn bn(&mut self, pred: usize) -> usize {
        self.push(LayerKind::Bn, vec![pred], 0, 0, 1, 0)
    }

    pub fn relu(&mut self, pred: usize) -> usize {
        self.push(LayerKind::Relu, vec![pred], 0, 0, 1, 0)
    }

    pub fn maxpool(&mut self, pred: usize, size: usize, stride: usize) -> usize {
        self.push(LayerKind::Maxpool, vec![pred], 0, size, stride, 0)
    }

    pub fn flatten(&mut self, pred: usize) -> usize {
        self.push(LayerKind::Flatten, vec![pred], 0, 0, 1, 0)
    }

    pub fn fc(&mut self, pred: usize, width: usize) -> usize {
        self.push(LayerKind::Fc, vec![pred], width, 0, 1, 0)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(LayerKind::Add, vec![a, b], 0, 0, 1, 0)
    }

    /// conv -> bn -> relu; returns the relu id.
    pub fn conv_bn_relu(&mut self, pred: Option<usize>, width: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let c = self.conv(pred, width, kernel, stride, padding);
        let b = self.bn(c);
        self.relu(b)
    }

    pub fn finish(self) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec { layers: self.layers, input_shape: self.input_shape, classes: self.classes };
        let topo = spec.topology()?;
        for l in spec.layers.iter_mut() {
            l.prunable = l.kind == LayerKind::Conv && topo.successor[l.id].is_some();
        }
        spec.topology()?;
        Ok(spec)
    }
}

/// Plain VGG: stages of 3x3 conv/BN/ReLU blocks, each stage closed by a 2x2
/// max pool, then an optional hidden fc layer and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct VggConfig {
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub stages: Vec<Vec<usize>>,
    pub hidden_fc: Option<usize>,
}

pub fn build_vgg(cfg: &VggConfig) -> Result<NetworkSpec> {
    if cfg.stages.iter().flatten().any(|&w| w == 0) || cfg.stages.iter().any(Vec::is_empty) {
        return Err(Error::InvalidSpec("VGG stages need positive widths".into()));
    }
    let mut b = SpecBuilder::new(cfg.input_shape, cfg.classes);
    let mut cur = None;
    for stage in &cfg.stages {
        for &w in stage {
            cur = Some(b.conv_bn_relu(cur, w, 3, 1, 1));
        }
        cur = Some(b.maxpool(cur.expect("stage is non-empty"), 2, 2));
    }
    let mut top = b.flatten(cur.ok_or_else(|| Error::InvalidSpec("VGG needs at least one stage".into()))?);
    if let Some(h) = cfg.hidden_fc {
        let f = b.fc(top, h);
        top = b.relu(f);
    }
    b.fc(top, cfg.classes);
    b.finish()
}

/// Splits a flat width list into stages of the given sizes.
fn staged(widths: &[usize], sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if widths.len() != total {
        return Err(Error::InvalidSpec(format!("expected {total} widths, got {}", widths.len())));
    }
    let mut rest = widths;
    Ok(sizes
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// 13-conv VGG for 32x32x3 inputs and 10 classes, with a 512-unit hidden fc.
pub fn build_vgg_cifar(widths: &[usize]) -> Result<NetworkSpec> {
    build_vgg(&VggConfig {
        input_shape: [32, 32, 3],
        classes: 10,
        stages: staged(widths, &[2, 2, 3, 3, 3])?,
        hidden_fc: Some(512),
    })
}

/// 8-conv VGG in four stages of two, classifier directly on the features.
pub fn vgg_small(input_shape: [usize; 3], classes: usize, widths: &[usize]) -> Result<NetworkSpec> {
    build_vgg(&VggConfig { input_shape, classes, stages: staged(widths, &[2, 2, 2, 2])?, hidden_fc: None })
}

/// Three conv/BN/ReLU/pool stages and a linear classifier.
pub fn build_three_conv(input_shape: [usize; 3], classes: usize, widths: &[usize]) -> Result<NetworkSpec> {
    build_vgg(&VggConfig {
        input_shape,
        classes,
        stages: staged(widths, &[1, 1, 1])?,
        hidden_fc: None,
    })
}

/// Residual net: a stem conv, then `stage_widths.len()` stages of basic
/// blocks (the first block of every later stage downsamples with a 1x1
/// projection shortcut), global max pooling and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetConfig {
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

/// Only the first conv of each block (the one not added to the identity
/// path) is prunable.
pub fn build_small_resnet(cfg: &ResNetConfig) -> Result<NetworkSpec> {
    if cfg.stage_widths.is_empty() || cfg.stage_widths.contains(&0) || cfg.blocks_per_stage == 0 {
        return Err(Error::InvalidSpec("residual net needs positive stage widths and blocks".into()));
    }
    let mut b = SpecBuilder::new(cfg.input_shape, cfg.classes);
    let mut cur = b.conv_bn_relu(None, cfg.stage_widths[0], 3, 1, 1);
    let mut channels = cfg.stage_widths[0];
    let mut extent = cfg.input_shape[0].min(cfg.input_shape[1]);
    for (s, &w) in cfg.stage_widths.iter().enumerate() {
        for blk in 0..cfg.blocks_per_stage {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let a = b.conv_bn_relu(Some(cur), w, 3, stride, 1);
            let c2 = b.conv(Some(a), w, 3, 1, 1);
            let main = b.bn(c2);
            let shortcut = if stride != 1 || channels != w {
                let p = b.conv(Some(cur), w, 1, stride, 0);
                b.bn(p)
            } else {
                cur
            };
            let sum = b.add(main, shortcut);
            cur = b.relu(sum);
            channels = w;
            if stride == 2 {
                extent = (extent - 1) / 2 + 1;
            }
        }
    }
    let pooled = b.maxpool(cur, extent, extent);
    let flat = b.flatten(pooled);
    b.fc(flat, cfg.classes);
    b.finish()
}

/// Multiplies every prunable conv width by `factor`, rounding to the nearest
/// integer with ties up and a floor of one.
pub fn scale_widths(spec: &NetworkSpec, factor: f64) -> Result<NetworkSpec> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!("width factor must be positive, got {factor}")));
    }
    let mut out = spec.clone();
    for l in out.layers.iter_mut().filter(|l| l.prunable) {
        l.width = ((l.width as f64 * factor + 0.5).floor() as usize).max(1);
    }
    out.topology()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::flops_of;

    #[test]
    fn vgg_cifar_has_13_prunable_convs() {
        let spec = build_vgg_cifar(&VGG16_CIFAR_WIDTHS).unwrap();
        assert_eq!(spec.conv_layers().count(), 13);
        assert_eq!(spec.prunable_layers().len(), 13);
    }

    #[test]
    fn wrong_width_count_is_rejected() {
        assert!(build_vgg_cifar(&[64; 12]).is_err());
        assert!(vgg_small([16, 16, 3], 4, &[8; 7]).is_err());
    }

    #[test]
    fn redesigned_widths_stay_near_original_budget() {
        let spec = build_vgg_cifar(&VGG16_REDESIGNED_WIDTHS).unwrap();
        let f = flops_of(&spec).unwrap() as f64;
        assert!((f / 312e6 - 1.0).abs() <= 0.02, "{f}");
    }

    #[test]
    fn resnet_block_outputs_are_not_prunable() {
        let cfg = ResNetConfig { input_shape: [16, 16, 3], classes: 4, stage_widths: vec![8, 16, 32], blocks_per_stage: 2 };
        let spec = build_small_resnet(&cfg).unwrap();
        let topo = spec.topology().unwrap();
        for l in spec.conv_layers() {
            let point = topo.mask_point[l.id].unwrap();
            let feeds_add = topo.consumers[point].iter().any(|&c| spec.layers[c].kind == LayerKind::Add);
            if feeds_add || topo.consumers[point].len() > 1 {
                assert!(!l.prunable, "layer {} feeds the identity path", l.id);
            }
        }
        // exactly one internal conv per block
        assert_eq!(spec.prunable_layers().len(), 6);
    }

    #[test]
    fn scale_rounds_and_skips_unprunable() {
        let spec = vgg_small([16, 16, 3], 4, &VGG_SMALL_WIDTHS).unwrap();
        assert_eq!(scale_widths(&spec, 1.0).unwrap(), spec);
        let big = build_vgg_cifar(&VGG16_CIFAR_WIDTHS).unwrap();
        let scaled = scale_widths(&big, 1.5).unwrap();
        assert_eq!(scaled.layers[0].width, 96);
        let cfg = ResNetConfig { input_shape: [8, 8, 3], classes: 3, stage_widths: vec![4, 8, 8], blocks_per_stage: 1 };
        let res = build_small_resnet(&cfg).unwrap();
        let scaled = scale_widths(&res, 1.25).unwrap();
        for (a, b) in res.layers.iter().zip(&scaled.layers) {
            if a.prunable {
                assert_eq!(b.width, ((a.width as f64 * 1.25 + 0.5).floor()) as usize);
            } else {
                assert_eq!(a.width, b.width);
            }
        }
        // ties round up: 5 * 1.5 = 7.5 -> 8
        let mut b = SpecBuilder::new([4, 4, 1], 2);
        let c = b.conv_bn_relu(None, 5, 3, 1, 1);
        let c2 = b.conv(Some(c), 3, 3, 1, 1);
        let f = b.flatten(c2);
        b.fc(f, 2);
        let s = b.finish().unwrap();
        assert_eq!(scale_widths(&s, 1.5).unwrap().layers[0].width, 8);
    }

    #[test]
    fn scaled_vgg_flops_grow_quadratically() {
        let base = build_vgg_cifar(&VGG16_CIFAR_WIDTHS).unwrap();
        let scaled = scale_widths(&base, 1.5).unwrap();
        let ratio = flops_of(&scaled).unwrap() as f64 / flops_of(&base).unwrap() as f64;
        // first conv only grows linearly (3 input channels), fc head partly
        assert!(ratio > 2.2 && ratio < 2.25, "{ratio}");
    }
}
