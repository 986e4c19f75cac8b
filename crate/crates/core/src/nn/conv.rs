use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::Param;
use super::tensor::Tensor;

/// 3D convolution with cubic kernel (1 or 3), zero padding `kernel / 2` and
/// stride 1 or 2, lowered to a single GEMM through an im2col buffer.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = in_channels * kernel.pow(3);
        // He initialisation for leaky-ReLU(0.2) stacks.
        let std = (2.0 / (1.0 + 0.04) / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
            input: None,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn output_spatial(&self, spatial: [usize; 3]) -> [usize; 3] {
        let pad = self.kernel / 2;
        spatial.map(|n| (n + 2 * pad - self.kernel) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let out_sp = self.output_spatial(x.spatial());
        let n_out: usize = out_sp.iter().product();
        let k = self.in_channels * self.taps();
        let mut out = Tensor::zeros([self.out_channels, out_sp[0], out_sp[1], out_sp[2]]);
        for (co, b) in self.bias.value.iter().enumerate() {
            out.channel_mut(co).fill(*b);
        }
        let col_buf;
        let col: &[f32] = if self.is_pointwise() {
            x.data()
        } else {
            col_buf = im2col(x, self.kernel, self.stride, out_sp);
            &col_buf
        };
        gemm(
            self.out_channels,
            k,
            n_out,
            &self.weight.value,
            (k as isize, 1),
            col,
            (n_out as isize, 1),
            out.data_mut(),
            1.0,
        );
        self.input = cache.then(|| x.clone());
        out
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_out: &Tensor, accumulate_params: bool) -> Tensor {
        let x = self
            .input
            .take()
            .expect("Conv3d::backward called without a cached forward pass");
        let out_sp = grad_out.spatial();
        let n_out: usize = out_sp.iter().product();
        let k = self.in_channels * self.taps();
        let col_buf;
        let col: &[f32] = if self.is_pointwise() {
            x.data()
        } else {
            col_buf = im2col(&x, self.kernel, self.stride, out_sp);
            &col_buf
        };
        if accumulate_params {
            // dW[co, k] += dY[co, n] * col[k, n]^T
            gemm(
                self.out_channels,
                n_out,
                k,
                grad_out.data(),
                (n_out as isize, 1),
                col,
                (1, n_out as isize),
                &mut self.weight.grad,
                1.0,
            );
            for co in 0..self.out_channels {
                let s: f64 = grad_out.channel(co).iter().map(|&v| v as f64).sum();
                self.bias.grad[co] += s as f32;
            }
        }
        // dcol[k, n] = W[co, k]^T * dY[co, n]
        let mut dcol = vec![0.0f32; k * n_out];
        gemm(
            k,
            self.out_channels,
            n_out,
            &self.weight.value,
            (1, k as isize),
            grad_out.data(),
            (n_out as isize, 1),
            &mut dcol,
            0.0,
        );
        if self.is_pointwise() {
            Tensor::from_vec(x.shape(), dcol)
        } else {
            col2im(&dcol, x.shape(), self.kernel, self.stride, out_sp)
        }
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe dense row- or
    // column-major layouts of exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `off`
/// (already shifted by the padding), given input length `n` and stride `s`.
fn valid_range(off: isize, n: usize, s: usize, out_n: usize) -> (usize, usize) {
    // need 0 <= o*s + off < n
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let hi_num = n as isize - off;
    let hi = if hi_num <= 0 {
        0
    } else {
        ((hi_num as usize).div_ceil(s)).min(out_n)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &Tensor, kernel: usize, stride: usize, out_sp: [usize; 3]) -> Vec<f32> {
    let [c, d, h, w] = x.shape();
    let [od, oh, ow] = out_sp;
    let n_out = od * oh * ow;
    let taps = kernel.pow(3);
    let pad = (kernel / 2) as isize;
    let mut col = vec![0.0f32; c * taps * n_out];
    let xd = x.data();
    for ci in 0..c {
        for kz in 0..kernel {
            let offz = kz as isize - pad;
            let (z_lo, z_hi) = valid_range(offz, d, stride, od);
            for ky in 0..kernel {
                let offy = ky as isize - pad;
                let (y_lo, y_hi) = valid_range(offy, h, stride, oh);
                for kx in 0..kernel {
                    let offx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(offx, w, stride, ow);
                    let row = ci * taps + (kz * kernel + ky) * kernel + kx;
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    for oz in z_lo..z_hi {
                        let iz = (oz * stride) as isize + offz;
                        for oy in y_lo..y_hi {
                            let iy = (oy * stride) as isize + offy;
                            let src_row = ((ci * d + iz as usize) * h + iy as usize) * w;
                            let dst_row = (oz * oh + oy) * ow;
                            if stride == 1 {
                                let ix0 = (x_lo as isize + offx) as usize;
                                dst[dst_row + x_lo..dst_row + x_hi].copy_from_slice(
                                    &xd[src_row + ix0..src_row + ix0 + (x_hi - x_lo)],
                                );
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ((ox * stride) as isize + offx) as usize;
                                    dst[dst_row + ox] = xd[src_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &[f32],
    in_shape: [usize; 4],
    kernel: usize,
    stride: usize,
    out_sp: [usize; 3],
) -> Tensor {
    let [c, d, h, w] = in_shape;
    let [od, oh, ow] = out_sp;
    let n_out = od * oh * ow;
    let taps = kernel.pow(3);
    let pad = (kernel / 2) as isize;
    let mut out = Tensor::zeros(in_shape);
    let xd = out.data_mut();
    for ci in 0..c {
        for kz in 0..kernel {
            let offz = kz as isize - pad;
            let (z_lo, z_hi) = valid_range(offz, d, stride, od);
            for ky in 0..kernel {
                let offy = ky as isize - pad;
                let (y_lo, y_hi) = valid_range(offy, h, stride, oh);
                for kx in 0..kernel {
                    let offx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(offx, w, stride, ow);
                    let row = ci * taps + (kz * kernel + ky) * kernel + kx;
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for oz in z_lo..z_hi {
                        let iz = (oz * stride) as isize + offz;
                        for oy in y_lo..y_hi {
                            let iy = (oy * stride) as isize + offy;
                            let dst_row = ((ci * d + iz as usize) * h + iy as usize) * w;
                            let src_row = (oz * oh + oy) * ow;
                            if stride == 1 {
                                let ix0 = (x_lo as isize + offx) as usize;
                                let dst = &mut xd[dst_row + ix0..dst_row + ix0 + (x_hi - x_lo)];
                                for (o, s) in dst.iter_mut().zip(&src[src_row + x_lo..src_row + x_hi])
                                {
                                    *o += *s;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ((ox * stride) as isize + offx) as usize;
                                    xd[dst_row + ix] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution in f64.
    fn naive_conv(conv: &Conv3d, x: &Tensor) -> Vec<f64> {
        let [c, d, h, w] = x.shape();
        let [od, oh, ow] = conv.output_spatial(x.spatial());
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; conv.out_channels * od * oh * ow];
        for co in 0..conv.out_channels {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..c {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * conv.stride) as isize + kz as isize - pad;
                                        let iy = (oy * conv.stride) as isize + ky as isize - pad;
                                        let ix = (ox * conv.stride) as isize + kx as isize - pad;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let wv = conv.weight.value
                                            [((co * c + ci) * k + kz) * k * k + ky * k + kx];
                                        let xv = x.data()[((ci * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize];
                                        acc += wv as f64 * xv as f64;
                                    }
                                }
                            }
                        }
                        out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(3, 4, k, s, &mut rng);
            for b in conv.bias.value.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
            let x = random_tensor([3, 6, 5, 4], &mut rng);
            let y = conv.forward(&x, false);
            let expect = naive_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dY, conv(x)> differentiated w.r.t. x and W must match the
        // directional derivative computed through the direct convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(2, 3, k, s, &mut rng);
            let x = random_tensor([2, 6, 6, 4], &mut rng);
            let y = conv.forward(&x, true);
            let gy = random_tensor(y.shape(), &mut rng);
            let gx = conv.backward(&gy, true);

            let dx = random_tensor(x.shape(), &mut rng);
            let mut xp = x.clone();
            xp.add_assign(&dx);
            let bias_free = |t: &[f64], conv: &Conv3d| -> Vec<f64> {
                let n = t.len() / conv.out_channels;
                t.iter()
                    .enumerate()
                    .map(|(i, v)| v - conv.bias.value[i / n] as f64)
                    .collect()
            };
            let ydx = bias_free(&naive_conv(&conv, &dx), &conv);
            let lhs: f64 = gy.data().iter().zip(&ydx).map(|(a, b)| *a as f64 * b).sum();
            let rhs: f64 = gx.data().iter().zip(dx.data()).map(|(a, b)| (*a * *b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "k={k} s={s}");

            // weight gradient: <dY, conv_{dW}(x)>
            let mut probe = conv.clone();
            let dw: Vec<f32> = (0..probe.weight.value.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            probe.weight.value = dw.clone();
            probe.bias.value.fill(0.0);
            let ydw = naive_conv(&probe, &x);
            let lhs: f64 = gy.data().iter().zip(&ydw).map(|(a, b)| *a as f64 * b).sum();
            let rhs: f64 = conv.weight.grad.iter().zip(&dw).map(|(a, b)| (*a * *b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "weights k={k} s={s}");
        }
    }
}
