use super::gemm::gemm;
use super::{spatial_dims, spatial_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Kernel `r x s x c_in x c_out`, bias `c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_extent(input: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    r: usize,
    s: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    batched: bool,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.r * self.s * self.c_in
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

impl<T: Element> ConvParams<T> {
    pub fn kernel_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.kernel.shape() {
            [r, s, ci, co] => Ok((r, s, ci, co)),
            _ => Err(Error::Shape(format!(
                "conv kernel must be rank 4, got {:?}",
                self.kernel.shape()
            ))),
        }
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<Geometry> {
        let (n, h, w, c) = spatial_dims(input, "conv2d")?;
        let (r, s, c_in, c_out) = self.kernel_dims()?;
        if c != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {c_in}"
            )));
        }
        if self.bias.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias {:?} does not match {c_out} output channels",
                self.bias.shape()
            )));
        }
        let ho = conv_output_extent(h, r, self.stride, self.padding);
        let wo = conv_output_extent(w, s, self.stride, self.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{w} input too small for {r}x{s} kernel (stride {}, padding {})",
                self.stride, self.padding
            )));
        };
        Ok(Geometry {
            n,
            h,
            w,
            c_in,
            r,
            s,
            c_out,
            ho,
            wo,
            stride: self.stride,
            pad: self.padding,
            batched: input.rank() == 4,
        })
    }
}

/// Unfolds every receptive field into a row of length `r * s * c_in`.
fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.r {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.s {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let dst = row + (ky * g.s + kx) * g.c_in;
                        for (d, v) in cols[dst..dst + g.c_in].iter_mut().zip(&x[src..src + g.c_in]) {
                            *d = v.to_f64();
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.n * g.h * g.w * g.c_in];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.r {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.s {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let src = row + (ky * g.s + kx) * g.c_in;
                        for (d, v) in x[dst..dst + g.c_in].iter_mut().zip(&cols[src..src + g.c_in]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation `out_j = sum_k in_k * K[:, :, k, j] + b_j`. No activation.
pub fn conv2d_forward<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = p.geometry(input)?;
    let cols = im2col(input.data(), &g);
    let kernel = p.kernel.to_f64_vec();
    let bias = p.bias.to_f64_vec();
    let mut out = Vec::with_capacity(g.rows() * g.c_out);
    for _ in 0..g.rows() {
        out.extend_from_slice(&bias);
    }
    gemm(g.rows(), g.patch(), g.c_out, &cols, false, &kernel, false, 1.0, &mut out);
    Tensor::from_f64(spatial_shape(g.batched, g.n, g.ho, g.wo, g.c_out), out)?
        .ensure_finite("conv2d_forward")
}

/// Gradients of `sum(grad_out * conv2d_forward(input, p))`.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = p.geometry(input)?;
    let expected = spatial_shape(g.batched, g.n, g.ho, g.wo, g.c_out);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Shape(format!(
            "conv2d_backward: grad_out {:?}, forward output {expected:?}",
            grad_out.shape()
        )));
    }
    let dy = grad_out.to_f64_vec();
    let cols = im2col(input.data(), &g);
    let kernel = p.kernel.to_f64_vec();

    let mut grad_kernel = vec![0.0; g.patch() * g.c_out];
    gemm(g.patch(), g.rows(), g.c_out, &cols, true, &dy, false, 0.0, &mut grad_kernel);

    let mut grad_bias = vec![0.0; g.c_out];
    for row in dy.chunks(g.c_out) {
        for (acc, v) in grad_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let mut grad_cols = vec![0.0; g.rows() * g.patch()];
    gemm(g.rows(), g.c_out, g.patch(), &dy, false, &kernel, true, 0.0, &mut grad_cols);
    let grad_input = col2im(&grad_cols, &g);

    Ok(ConvGrads {
        grad_input: Tensor::from_f64(input.shape().to_vec(), grad_input)?
            .ensure_finite("conv2d_backward")?,
        grad_kernel: Tensor::from_f64(p.kernel.shape().to_vec(), grad_kernel)?
            .ensure_finite("conv2d_backward")?,
        grad_bias: Tensor::from_f64(vec![g.c_out], grad_bias)?.ensure_finite("conv2d_backward")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn conv_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Vec<f64> {
        let [n, h, w, ci] = *x.shape() else { unreachable!() };
        let [r, s, _, co] = *p.kernel.shape() else { unreachable!() };
        let ho = (h + 2 * p.padding - r) / p.stride + 1;
        let wo = (w + 2 * p.padding - s) / p.stride + 1;
        let xd = x.data();
        let kd = p.kernel.data();
        let mut out = Vec::new();
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for j in 0..co {
                        let mut acc = p.bias.data()[j];
                        for ky in 0..r {
                            for kx in 0..s {
                                for k in 0..ci {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = xd[((b * h + iy as usize) * w + ix as usize) * ci + k];
                                    acc += xv * kd[((ky * s + kx) * ci + k) * co + j];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let x = Tensor::<f32>::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let p = ConvParams {
            kernel: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
            stride: 1,
            padding: 0,
        };
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn zero_kernel_yields_bias_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 4, 5, 3], &mut rng).cast::<f32>();
        let p = ConvParams {
            kernel: Tensor::zeros(&[3, 3, 3, 2]),
            bias: Tensor::filled(&[2], 0.5),
            stride: 1,
            padding: 1,
        };
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_nested_loop_oracle_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 5, 5, 2], &mut rng);
        let p = ConvParams {
            kernel: random(&[3, 3, 2, 3], &mut rng),
            bias: random(&[3], &mut rng),
            stride: 1,
            padding: 1,
        };
        let got = conv2d_forward(&x, &p).unwrap();
        let want = conv_oracle(&x, &p);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn matches_oracle_over_shape_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for h in [1usize, 3, 5, 8] {
            for ci in [1usize, 2, 4] {
                for r in [1usize, 2, 3] {
                    for stride in [1usize, 2] {
                        for padding in [0usize, 1] {
                            if h + 2 * padding < r {
                                continue;
                            }
                            let w = (h + 1).min(8);
                            let x = random(&[2, h, w, ci], &mut rng);
                            let p = ConvParams {
                                kernel: random(&[r, r, ci, 3], &mut rng),
                                bias: random(&[3], &mut rng),
                                stride,
                                padding,
                            };
                            let got = conv2d_forward(&x, &p).unwrap();
                            let want = conv_oracle(&x, &p);
                            assert_eq!(got.len(), want.len());
                            for (a, b) in got.data().iter().zip(&want) {
                                assert!((a - b).abs() <= 1e-6, "h={h} ci={ci} r={r} s={stride} p={padding}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]);
        let p = ConvParams {
            kernel: Tensor::zeros(&[3, 3, 3, 1]),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: 1,
        };
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 4, 4, 2], &mut rng);
        let p = ConvParams {
            kernel: random(&[3, 3, 2, 2], &mut rng),
            bias: random(&[2], &mut rng),
            stride: 1,
            padding: 1,
        };
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[2, 4, 4, 2])).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_case_bias_gradient_is_channel_sum() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ConvParams {
            kernel: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
            stride: 1,
            padding: 0,
        };
        let dy = Tensor::new(vec![1, 2, 2, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let g = conv2d_backward(&x, &p, &dy).unwrap();
        assert!((g.grad_bias.data()[0] - 1.75).abs() < 1e-12);
        assert_eq!(g.grad_input.data(), dy.data());
    }
}
