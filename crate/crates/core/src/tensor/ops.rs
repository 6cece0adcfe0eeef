use super::gemm::gemm;
use super::{conv_output_extent, spatial_dims, spatial_shape, Element, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v.to_f64() > 0.0 { v } else { T::default() })
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu_backward: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if x.to_f64() > 0.0 { *g } else { T::default() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

struct PoolGeometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
}

fn pool_geometry<T: Element>(input: &Tensor<T>, size: usize, stride: usize) -> Result<PoolGeometry> {
    let (n, h, w, c) = spatial_dims(input, "maxpool2d")?;
    match (
        size > 0,
        conv_output_extent(h, size, stride, 0),
        conv_output_extent(w, size, stride, 0),
    ) {
        (true, Some(ho), Some(wo)) => Ok(PoolGeometry { n, h, w, c, ho, wo }),
        _ => Err(Error::Shape(format!(
            "maxpool2d: window {size} stride {stride} does not fit {h}x{w}"
        ))),
    }
}

/// Flat input index of the maximum for every output element; ties go to the
/// first position in scan order.
fn pool_argmax<T: Element>(input: &Tensor<T>, g: &PoolGeometry, size: usize, stride: usize) -> Vec<usize> {
    let x = input.data();
    let mut idx = Vec::with_capacity(g.n * g.ho * g.wo * g.c);
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for k in 0..g.c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = ((b * g.h + oy * stride + ky) * g.w + ox * stride + kx) * g.c + k;
                            let v = x[i].to_f64();
                            if best == usize::MAX || v > best_v {
                                best = i;
                                best_v = v;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    idx
}

pub fn maxpool2d_forward<T: Element>(input: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let g = pool_geometry(input, size, stride)?;
    let data = pool_argmax(input, &g, size, stride)
        .into_iter()
        .map(|i| input.data()[i])
        .collect();
    Tensor::new(spatial_shape(input.rank() == 4, g.n, g.ho, g.wo, g.c), data)
}

pub fn maxpool2d_backward<T: Element>(
    input: &Tensor<T>,
    size: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = pool_geometry(input, size, stride)?;
    let idx = pool_argmax(input, &g, size, stride);
    if grad_out.len() != idx.len() {
        return Err(Error::Shape(format!(
            "maxpool2d_backward: grad has {} values, expected {}",
            grad_out.len(),
            idx.len()
        )));
    }
    let mut dx = vec![0.0f64; input.len()];
    for (i, gv) in idx.into_iter().zip(grad_out.data()) {
        dx[i] += gv.to_f64();
    }
    Tensor::from_f64(input.shape().to_vec(), dx)
}

/// Fully connected layer: weight `d_in x d_out`, bias `d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FcGrads<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn fc_dims<T: Element>(input: &Tensor<T>, p: &FcParams<T>) -> Result<(usize, usize, usize)> {
    let [n, d] = *input.shape() else {
        return Err(Error::Shape(format!("fc: input must be N x D, got {:?}", input.shape())));
    };
    let [d_in, d_out] = *p.weight.shape() else {
        return Err(Error::Shape(format!("fc: weight must be rank 2, got {:?}", p.weight.shape())));
    };
    if d != d_in || p.bias.shape() != [d_out] {
        return Err(Error::Shape(format!(
            "fc: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            p.weight.shape(),
            p.bias.shape()
        )));
    }
    Ok((n, d_in, d_out))
}

pub fn fc_forward<T: Element>(input: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = fc_dims(input, p)?;
    let bias = p.bias.to_f64_vec();
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(&bias);
    }
    gemm(n, d_in, d_out, &input.to_f64_vec(), false, &p.weight.to_f64_vec(), false, 1.0, &mut out);
    Tensor::from_f64(vec![n, d_out], out)?.ensure_finite("fc_forward")
}

pub fn fc_backward<T: Element>(input: &Tensor<T>, p: &FcParams<T>, grad_out: &Tensor<T>) -> Result<FcGrads<T>> {
    let (n, d_in, d_out) = fc_dims(input, p)?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::Shape(format!(
            "fc_backward: grad {:?}, expected [{n}, {d_out}]",
            grad_out.shape()
        )));
    }
    let dy = grad_out.to_f64_vec();
    let mut dw = vec![0.0; d_in * d_out];
    gemm(d_in, n, d_out, &input.to_f64_vec(), true, &dy, false, 0.0, &mut dw);
    let mut dx = vec![0.0; n * d_in];
    gemm(n, d_out, d_in, &dy, false, &p.weight.to_f64_vec(), true, 0.0, &mut dx);
    let mut db = vec![0.0; d_out];
    for row in dy.chunks(d_out) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(FcGrads {
        grad_input: Tensor::from_f64(vec![n, d_in], dx)?.ensure_finite("fc_backward")?,
        grad_weight: Tensor::from_f64(vec![d_in, d_out], dw)?.ensure_finite("fc_backward")?,
        grad_bias: Tensor::from_f64(vec![d_out], db)?,
    })
}

#[derive(Clone, Debug)]
pub struct XentOutput<T = f32> {
    /// Mean cross-entropy over the batch.
    pub mean_loss: f64,
    pub per_example: Vec<f64>,
    /// Gradient of `mean_loss` with respect to the logits.
    pub grad_logits: Tensor<T>,
    /// Number of examples whose argmax equals the label.
    pub correct: usize,
}

/// Softmax cross-entropy over `N x K` logits.
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!("softmax_xent: logits must be N x K, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("softmax_xent: {n} rows, {} labels", labels.len())));
    }
    let mut per_example = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n * k);
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let z: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        per_example.push(lse - z[y]);
        let argmax = z
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > z[best] { j } else { best });
        if argmax == y {
            correct += 1;
        }
        for (j, v) in z.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - target) / n as f64));
        }
    }
    let mean_loss = per_example.iter().sum::<f64>() / n as f64;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent"));
    }
    Ok(XentOutput {
        mean_loss,
        per_example,
        grad_logits: Tensor::new(vec![n, k], grad)?,
        correct,
    })
}
