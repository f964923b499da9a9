//! Forward and input-gradient kernels for the decoder's layer types.
//!
//! Each output plane (forward) or input plane (backward) is produced by one
//! task with a fixed accumulation order, so results are bit-identical
//! regardless of how many worker threads run.

use rayon::prelude::*;

use crate::image::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPSILON: f64 = 1e-5;

/// 3×3 convolution weights, `[out][in][ky][kx]`, zero padding of one pixel,
/// no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub out_channels: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
}

impl Conv3x3 {
    #[inline]
    fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * 3 + ky) * 3 + kx]
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        ((height - 1) / self.stride + 1, (width - 1) / self.stride + 1)
    }

    /// Range of output columns whose tap `kx` lands inside `0..width`.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + k - 1
        let lo = if k == 0 { 1usize.div_ceil(self.stride) } else { 0 };
        let mut hi = out_len;
        while hi > lo && (hi - 1) * self.stride + k > in_len {
            hi -= 1;
        }
        (lo, hi)
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels(), self.in_channels, "conv input channels");
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.output_dims(h, w);
        let s = self.stride;
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let plane = oh * ow;
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(oc, dst)| {
                for ic in 0..self.in_channels {
                    let src = input.plane(ic);
                    for ky in 0..3 {
                        let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                        for kx in 0..3 {
                            let wgt = self.weight(oc, ic, ky, kx);
                            let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - 1;
                                let row = &src[iy * w..(iy + 1) * w];
                                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    let srow = &row[ox_lo + kx - 1..ox_hi + kx - 1];
                                    for (d, v) in drow[ox_lo..ox_hi].iter_mut().zip(srow) {
                                        *d += wgt * v;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        drow[ox] += wgt * row[ox * s + kx - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        out
    }

    /// Gradient with respect to the input, given the gradient of the output.
    pub fn backward_input(&self, grad_out: &Tensor, in_height: usize, in_width: usize) -> Tensor {
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let (h, w) = (in_height, in_width);
        let s = self.stride;
        let mut grad_in = Tensor::zeros(self.in_channels, h, w);
        grad_in
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ic, dst)| {
                for oc in 0..self.out_channels {
                    let g = grad_out.plane(oc);
                    for ky in 0..3 {
                        let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                        for kx in 0..3 {
                            let wgt = self.weight(oc, ic, ky, kx);
                            let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - 1;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                let drow = &mut dst[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let d = &mut drow[ox_lo + kx - 1..ox_hi + kx - 1];
                                    for (dv, gv) in d.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                        *dv += wgt * gv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        drow[ox * s + kx - 1] += wgt * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        grad_in
    }
}

/// Cached statistics of one non-affine instance normalization.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel standardization over spatial positions with population
/// variance.
pub fn instance_norm(input: &Tensor) -> NormCache {
    let n = input.plane_len() as f64;
    let mut out = input.zeros_like();
    let mut inv_std = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let x = input.plane(c);
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPSILON).sqrt();
        for (o, v) in out.plane_mut(c).iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    NormCache {
        normalized: out,
        inv_std,
    }
}

pub fn instance_norm_backward(cache: &NormCache, grad_out: &Tensor) -> Tensor {
    let xhat = &cache.normalized;
    let n = xhat.plane_len() as f64;
    let mut grad_in = grad_out.zeros_like();
    for c in 0..xhat.channels() {
        let g = grad_out.plane(c);
        let xh = xhat.plane(c);
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[c];
        for ((o, gv), xv) in grad_in.plane_mut(c).iter_mut().zip(g).zip(xh) {
            *o = inv * (gv - mean_g - xv * mean_gx);
        }
    }
    grad_in
}

#[inline]
pub fn leaky_relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// `activated` is the layer output; its sign matches the pre-activation.
pub fn leaky_relu_backward(activated: &Tensor, grad_out: &Tensor) -> Tensor {
    grad_out
        .zip_map(activated, |g, y| if y > 0.0 { g } else { LEAKY_SLOPE * g })
        .expect("same shape")
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    grad_out
        .zip_map(output, |g, y| g * y * (1.0 - y))
        .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyed::derive_stream;

    fn random_tensor(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut s = derive_stream(seed, "layers-test");
        Tensor::from_fn(c, h, w, |_, _, _| s.gaussian())
    }

    fn random_conv(seed: u64, out_c: usize, in_c: usize, stride: usize) -> Conv3x3 {
        let mut s = derive_stream(seed, "layers-test-conv");
        Conv3x3 {
            out_channels: out_c,
            in_channels: in_c,
            stride,
            weights: (0..out_c * in_c * 9).map(|_| s.gaussian()).collect(),
        }
    }

    // Direct definition, independent of the sliced kernels above.
    fn naive_conv(conv: &Conv3x3, x: &Tensor) -> Tensor {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let (oh, ow) = conv.output_dims(x.height(), x.width());
        Tensor::from_fn(conv.out_channels, oh, ow, |oc, oy, ox| {
            let mut acc = 0.0;
            for ic in 0..conv.in_channels {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * conv.stride + ky) as isize - 1;
                        let ix = (ox * conv.stride + kx) as isize - 1;
                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            acc += conv.weight(oc, ic, ky, kx)
                                * x.get(ic, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_definition() {
        for (stride, h, w) in [(1, 7, 9), (2, 8, 8), (2, 9, 7)] {
            let conv = random_conv(stride as u64, 4, 3, stride);
            let x = random_tensor(11, 3, h, w);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)>
        for (stride, h, w) in [(1, 6, 5), (2, 8, 6), (2, 7, 9)] {
            let conv = random_conv(3, 5, 2, stride);
            let x = random_tensor(4, 2, h, w);
            let y = conv.forward(&x);
            let g = random_tensor(5, y.channels(), y.height(), y.width());
            let gx = conv.backward_input(&g, h, w);
            assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
        }
    }

    #[test]
    fn instance_norm_of_zero_is_zero() {
        let cache = instance_norm(&Tensor::zeros(2, 4, 4));
        assert!(cache.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let x = random_tensor(9, 2, 4, 5);
        let weights = random_tensor(10, 2, 4, 5);
        let loss = |t: &Tensor| dot(&instance_norm(t).normalized, &weights);
        let cache = instance_norm(&x);
        let grad = instance_norm_backward(&cache, &weights);
        let h = 1e-4;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn activations() {
        assert_eq!(leaky_relu(2.0), 2.0);
        assert_eq!(leaky_relu(-2.0), -0.4);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
