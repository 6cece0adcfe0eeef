//! Helpers shared by the integration tests.
#![allow(dead_code)]

use aofp::data::{synthetic, Dataset, SyntheticConfig};
use aofp::engine::*;
use aofp::graph::*;
use aofp::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- finite differences (f64) ----

pub const FD_EPS: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-3;

pub type T64 = Tensor<f64>;

/// Values in `±[0.05, 1)`, away from the relu and max kinks.
pub fn random64(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every entry of `x`.
pub fn fd_error(x: &T64, analytic: &T64, mut loss: impl FnMut(&T64) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_EPS;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_EPS;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_EPS);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
    }
    worst
}

pub fn conv_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..3);
    let (r, stride, padding) = [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 1, 0)][rng.random_range(0..5)];
    let h = rng.random_range(r.max(2)..6);
    let w = rng.random_range(r.max(2)..6);
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let x = random64(&[n, h, w, ci], &mut rng);
    let p = ConvParams { kernel: random64(&[r, r, ci, co], &mut rng), bias: random64(&[co], &mut rng), stride, padding };
    let y = conv2d_forward(&x, &p).unwrap();
    let g = random64(y.shape(), &mut rng);
    let grads = conv2d_backward(&x, &p, &g).unwrap();
    let a = fd_error(&x, &grads.grad_input, |x| dot(&conv2d_forward(x, &p).unwrap(), &g));
    let b = fd_error(&p.kernel, &grads.grad_kernel, |k| {
        dot(&conv2d_forward(&x, &ConvParams { kernel: k.clone(), ..p.clone() }).unwrap(), &g)
    });
    let c = fd_error(&p.bias, &grads.grad_bias, |v| {
        dot(&conv2d_forward(&x, &ConvParams { bias: v.clone(), ..p.clone() }).unwrap(), &g)
    });
    a.max(b).max(c)
}

pub fn bn_fd(seed: u64, mode: BnMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
    let c = shape[3];
    let x = random64(&shape, &mut rng);
    let mut p = BnParams::<f64>::identity(c);
    p.gamma = random64(&[c], &mut rng);
    p.beta = random64(&[c], &mut rng);
    p.running_mean = random64(&[c], &mut rng);
    p.running_var = random64(&[c], &mut rng).map(|v| v.abs() + 0.5);
    let fwd = batchnorm_forward(&x, &p, mode, None).unwrap();
    let g = random64(fwd.output.shape(), &mut rng);
    let grads = batchnorm_backward(&x, &p, &fwd.stats, fwd.batch_stats, &g).unwrap();
    let out = |x: &T64, p: &BnParams<f64>| dot(&batchnorm_forward(x, p, mode, None).unwrap().output, &g);
    let a = fd_error(&x, &grads.grad_input, |x| out(x, &p));
    let b = fd_error(&p.gamma, &grads.grad_gamma, |v| out(&x, &BnParams { gamma: v.clone(), ..p.clone() }));
    let c = fd_error(&p.beta, &grads.grad_beta, |v| out(&x, &BnParams { beta: v.clone(), ..p.clone() }));
    a.max(b).max(c)
}

pub fn fc_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
    let x = random64(&[n, d], &mut rng);
    let p = FcParams { weight: random64(&[d, k], &mut rng), bias: random64(&[k], &mut rng) };
    let g = random64(&[n, k], &mut rng);
    let grads = fc_backward(&x, &p, &g).unwrap();
    let a = fd_error(&x, &grads.grad_input, |x| dot(&fc_forward(x, &p).unwrap(), &g));
    let b = fd_error(&p.weight, &grads.grad_weight, |w| {
        dot(&fc_forward(&x, &FcParams { weight: w.clone(), bias: p.bias.clone() }).unwrap(), &g)
    });
    let c = fd_error(&p.bias, &grads.grad_bias, |v| {
        dot(&fc_forward(&x, &FcParams { weight: p.weight.clone(), bias: v.clone() }).unwrap(), &g)
    });
    a.max(b).max(c)
}

pub fn relu_pool_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..3), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4), rng.random_range(1..4)];
    let x = random64(&shape, &mut rng);
    let g = random64(&shape, &mut rng);
    let dx = relu_backward(&x, &g).unwrap();
    let a = fd_error(&x, &dx, |x| dot(&relu_forward(x), &g));
    let y = maxpool2d_forward(&x, 2, 2).unwrap();
    let g = random64(y.shape(), &mut rng);
    let dx = maxpool2d_backward(&x, 2, 2, &g).unwrap();
    a.max(fd_error(&x, &dx, |x| dot(&maxpool2d_forward(x, 2, 2).unwrap(), &g)))
}

pub fn xent_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
    let x = random64(&[n, k], &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let out = softmax_xent(&x, &labels).unwrap();
    fd_error(&x, &out.grad_logits, |x| softmax_xent(x, &labels).unwrap().mean_loss)
}

// ---- masking and reconstruction ----

/// Random parameters with non-trivial biases and BN statistics, so masked
/// channels would leak if they were not removed correctly.
pub fn perturbed_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut params = ModelParams::init(spec, rng).unwrap();
    for layer in &mut params.layers {
        if let LayerParams::Bn(bn) = layer {
            for v in bn.running_mean.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in bn.running_var.data_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
        for t in layer.trainable_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    params
}

pub fn random_masks(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Masks {
    let mut masks = Masks::new();
    for id in spec.prunable_layers() {
        let w = spec.layers[id].width;
        let mut keep: Vec<bool> = (0..w).map(|_| rng.random_bool(0.6)).collect();
        if !keep.contains(&true) {
            let j = rng.random_range(0..w);
            keep[j] = true;
        }
        if rng.random_bool(0.85) {
            masks.insert_binary(id, &keep);
        }
    }
    masks
}

pub fn random_inputs(n: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    let len = n * shape.iter().product::<usize>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vgg(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let widths: Vec<usize> = (0..8).map(|_| rng.random_range(2..10)).collect();
    vgg_small([16, 16, 3], rng.random_range(2..7), &widths).unwrap()
}

pub fn random_resnet(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e5);
    build_small_resnet(&ResNetConfig {
        input_shape: [8, 8, 3],
        classes: rng.random_range(2..7),
        stage_widths: (0..3).map(|_| rng.random_range(2..9)).collect(),
        blocks_per_stage: rng.random_range(1..3),
    })
    .unwrap()
}

/// Max abs logit difference between the masked network and its
/// reconstruction on `inputs` random inputs.
pub fn reconstruction_gap(spec: NetworkSpec, seed: u64, inputs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = perturbed_params(&spec, &mut rng);
    let masks = random_masks(&spec, &mut rng);
    let x = random_inputs(inputs, spec.input_shape, &mut rng);
    let net = Network::new(spec).unwrap();
    let (slim_spec, slim_params) = reconstruct(&net, &params, &masks).unwrap();
    for id in slim_spec.prunable_layers() {
        let expected = masks.active(id).unwrap_or(net.width(id));
        assert_eq!(slim_spec.layers[id].width, expected);
    }
    let slim = Network::new(slim_spec).unwrap();
    let a = net.predict(&params, &x, Some(&masks)).unwrap();
    let b = slim.predict(&slim_params, &x, None).unwrap();
    a.max_abs_diff(&b)
}

// ---- damage ----

pub fn toy_data(seed: u64) -> Dataset {
    let cfg = SyntheticConfig { examples: 400, seed, ..Default::default() };
    synthetic(&cfg).unwrap().downsample(2).unwrap()
}

pub fn toy_net(widths: [usize; 3], seed: u64) -> (Network, ModelParams) {
    let spec = build_three_conv([8, 8, 3], 6, &widths).unwrap();
    let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (Network::new(spec).unwrap(), params)
}

/// Zeroes the filters in `ablated` of conv `layer` and the matching channels
/// of its block's batch norm, so the block emits exact zeros for them.
pub fn zero_filters(net: &Network, params: &mut ModelParams, layer: usize, ablated: &[usize]) {
    let width = net.width(layer);
    let conv = params.conv_mut(layer).unwrap();
    for (i, v) in conv.kernel.data_mut().iter_mut().enumerate() {
        if ablated.contains(&(i % width)) {
            *v = 0.0;
        }
    }
    for &j in ablated {
        conv.bias.data_mut()[j] = 0.0;
    }
    let bn = net.topology().consumers[layer][0];
    let bn = params.bn_mut(bn).unwrap();
    for &j in ablated {
        bn.gamma.data_mut()[j] = 0.0;
        bn.beta.data_mut()[j] = 0.0;
    }
}

pub fn brute_damage(base: &Tensor, scored: &Tensor) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&b, &s) in base.data().iter().zip(scored.data()) {
        num += (b as f64 - s as f64).powi(2);
        den += (b as f64).powi(2);
    }
    num / den
}

pub struct DamageFixture {
    small: Dataset,
    full: Dataset,
}

impl DamageFixture {
    pub fn new() -> Self {
        Self {
            small: toy_data(1),
            full: synthetic(&SyntheticConfig { examples: 200, seed: 1, ..Default::default() }).unwrap(),
        }
    }

    /// One random scoring pass; returns the engine's t and the damage of the
    /// physically zeroed network.
    pub fn case(&self, case: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let widths: Vec<usize> = (0..8).map(|_| rng.random_range(2..9)).collect();
        let (spec, data) = if case % 2 == 0 {
            (vgg_small([16, 16, 3], 6, &widths).unwrap(), &self.full)
        } else {
            (build_three_conv([8, 8, 3], 6, &widths[..3]).unwrap(), &self.small)
        };
        let params = ModelParams::init(&spec, &mut rng).unwrap();
        let net = Network::new(spec).unwrap();
        let layers = net.spec().prunable_layers();
        let layer = layers[rng.random_range(0..layers.len())];
        let mut masks = Masks::new();
        if rng.random_bool(0.5) {
            let mut keep = vec![true; net.width(layer)];
            let j = rng.random_range(0..keep.len());
            keep[j] = false;
            masks.insert_binary(layer, &keep);
        }
        let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..data.len())).collect();
        let (x, _) = data.batch(&idx).unwrap();
        let (mode, source) = if rng.random_bool(0.5) { (BnMode::Eval, BnSource::Base) } else { (BnMode::Train, BnSource::Own) };

        let record = net.forward(&params, &x, Some(&masks), mode).unwrap();
        let mut state = LayerPruningState::new(layer, net.width(layer));
        let opts = ScoringOptions { bn_source: source, per_example: false };
        let sample = scoring_pass(&net, &params, &record, &masks, &mut state, &mut rng, opts).unwrap();
        assert!(state.records.iter().enumerate().all(|(j, r)| r.len() == usize::from(sample.ablated.contains(&j))));

        let mut zeroed = params.clone();
        zero_filters(&net, &mut zeroed, layer, &sample.ablated);
        let out = net.topology().successor[layer].as_ref().unwrap().output_point;
        let brute = net.forward(&zeroed, &x, Some(&masks), mode).unwrap();
        (sample.t.unwrap(), brute_damage(&record.outputs[out], &brute.outputs[out]))
    }
}

// ---- single-layer search driven by a synthetic damage model ----

pub type Trace = Vec<(usize, Vec<usize>, bool)>;

/// Damage of an ablation: the summed weight of the ablated filters.
pub fn synthetic_t(weights: &[f64], ablated: &[usize]) -> f64 {
    ablated.iter().map(|&j| weights[j]).sum()
}

/// Runs the engine's state machine on one layer until it finishes, taking
/// at least `phi` samples per decision. Each entry is (search space size,
/// picked set, pruned).
pub fn engine_search(weights: &[f64], theta: f64, phi: usize, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LayerPruningState::new(0, weights.len());
    let mut trace = Vec::new();
    loop {
        let mut n = 0;
        while n < phi || state.unsampled().is_some() {
            n += 1;
            let h = sample_ablation(&state.search_space, &mut rng).unwrap();
            state.record(&h, synthetic_t(weights, &h));
        }
        let size = state.search_space.len();
        match refine_step(&mut state, theta).unwrap() {
            Decision::Pruned { picked, .. } => trace.push((size, picked, true)),
            Decision::Refined { picked, .. } => trace.push((size, picked, false)),
            Decision::LayerFinished { picked, .. } => {
                trace.push((size, picked, false));
                assert_eq!(state.phase, Phase::Finished);
                return trace;
            }
        }
    }
}

/// Widths left after pruning, per trace.
pub fn survivors(width: usize, trace: &Trace) -> usize {
    width - trace.iter().filter(|t| t.2).map(|t| t.1.len()).sum::<usize>()
}
