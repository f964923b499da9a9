use crate::image::Tensor;

/// Steganalysis feedback: two logits (index 0 = stego, 1 = normal) and the
/// gradient of a weighted logit sum with respect to the image.
pub trait Steganalyzer: Send + Sync {
    fn logits(&self, img: &Tensor) -> [f64; 2];

    /// Gradient of `upstream[0]·logit0 + upstream[1]·logit1`.
    fn input_gradient(&self, img: &Tensor, upstream: [f64; 2]) -> Tensor;
}

/// 5×5 KV high-pass kernel, already divided by 12.
#[rustfmt::skip]
pub const KV_KERNEL: [f64; 25] = [
    -1.0 / 12.0,  2.0 / 12.0,  -2.0 / 12.0,  2.0 / 12.0, -1.0 / 12.0,
     2.0 / 12.0, -6.0 / 12.0,   8.0 / 12.0, -6.0 / 12.0,  2.0 / 12.0,
    -2.0 / 12.0,  8.0 / 12.0, -12.0 / 12.0,  8.0 / 12.0, -2.0 / 12.0,
     2.0 / 12.0, -6.0 / 12.0,   8.0 / 12.0, -6.0 / 12.0,  2.0 / 12.0,
    -1.0 / 12.0,  2.0 / 12.0,  -2.0 / 12.0,  2.0 / 12.0, -1.0 / 12.0,
];

/// Residual-energy detector: `logit0 = a·mean(r²) + b`, `logit1 = −logit0`,
/// where `r` is the valid-region KV residual of every channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuiltInDetector {
    pub gain: f64,
    pub bias: f64,
}

impl Default for BuiltInDetector {
    fn default() -> Self {
        Self {
            gain: 50.0,
            bias: -0.5,
        }
    }
}

impl BuiltInDetector {
    fn residual(img: &Tensor) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = img.shape();
        if h < 5 || w < 5 {
            return (Vec::new(), 0, 0);
        }
        let (rh, rw) = (h - 4, w - 4);
        let mut r = vec![0.0; c * rh * rw];
        for ch in 0..c {
            let p = img.plane(ch);
            for y in 0..rh {
                for x in 0..rw {
                    let mut acc = 0.0;
                    for ky in 0..5 {
                        for kx in 0..5 {
                            acc += KV_KERNEL[ky * 5 + kx] * p[(y + ky) * w + x + kx];
                        }
                    }
                    r[(ch * rh + y) * rw + x] = acc;
                }
            }
        }
        (r, rh, rw)
    }

    pub fn residual_energy(&self, img: &Tensor) -> f64 {
        let (r, _, _) = Self::residual(img);
        if r.is_empty() {
            return 0.0;
        }
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }
}

impl Steganalyzer for BuiltInDetector {
    fn logits(&self, img: &Tensor) -> [f64; 2] {
        let z = self.gain * self.residual_energy(img) + self.bias;
        [z, -z]
    }

    fn input_gradient(&self, img: &Tensor, upstream: [f64; 2]) -> Tensor {
        let (r, rh, rw) = Self::residual(img);
        let mut grad = img.zeros_like();
        if r.is_empty() {
            return grad;
        }
        let w = img.width();
        let dz = upstream[0] - upstream[1];
        let k = dz * self.gain * 2.0 / r.len() as f64;
        for ch in 0..img.channels() {
            let g = grad.plane_mut(ch);
            for y in 0..rh {
                for x in 0..rw {
                    let rv = k * r[(ch * rh + y) * rw + x];
                    for ky in 0..5 {
                        for kx in 0..5 {
                            g[(y + ky) * w + x + kx] += KV_KERNEL[ky * 5 + kx] * rv;
                        }
                    }
                }
            }
        }
        grad
    }
}
