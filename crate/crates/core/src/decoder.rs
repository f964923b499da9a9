//! The fixed random-weight decoder.
//!
//! Four hidden blocks of 3×3 convolution, instance normalization and
//! LeakyReLU, then a 3×3 output convolution and a sigmoid. Weights are drawn
//! from `derive_stream(k_w, "weights/layer{i}")` with He fan-in scaling and
//! never change. When the cover-to-secret ratio is not a power of two the
//! output convolution is followed by a parameter-free bilinear resample.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Tensor};
use crate::keyed::derive_stream;
use crate::layers::{
    instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, sigmoid,
    sigmoid_backward, Conv3x3, NormCache,
};
use crate::resample::{bilinear_resize, PlaneMap};

pub const HIDDEN_BLOCKS: usize = 4;
pub const DECODER_VERSION: &str = "fixed-decoder-v1";
const MAX_STRIDE: usize = 1 << HIDDEN_BLOCKS;

/// Cover size, secret size and decoder width fixing an embedding rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapacityProfile {
    pub name: String,
    pub cover_side: usize,
    pub secret_side: usize,
    pub channel_width: usize,
    /// Product of the conv strides.
    pub total_stride: usize,
}

impl CapacityProfile {
    /// Derives `total_stride` from the side ratio. Integer ratios must be
    /// powers of two no larger than 16; other ratios take the largest
    /// feasible stride and resample the remainder.
    pub fn new(
        name: impl Into<String>,
        cover_side: usize,
        secret_side: usize,
        channel_width: usize,
    ) -> Result<Self> {
        let name = name.into();
        if cover_side == 0 || secret_side == 0 || channel_width == 0 {
            return Err(Error::InvalidParameter(format!(
                "profile '{name}': sides and width must be positive"
            )));
        }
        if secret_side > cover_side {
            return Err(Error::InvalidParameter(format!(
                "profile '{name}': secret side {secret_side} exceeds cover side {cover_side}"
            )));
        }
        let total_stride = if cover_side.is_multiple_of(secret_side) {
            let ratio = cover_side / secret_side;
            if !ratio.is_power_of_two() || ratio > MAX_STRIDE {
                return Err(Error::InvalidParameter(format!(
                    "profile '{name}': stride {ratio} cannot be split over {HIDDEN_BLOCKS} \
                     blocks of stride 1 or 2"
                )));
            }
            ratio
        } else {
            let mut s = 1;
            while s * 2 <= MAX_STRIDE && cover_side.is_multiple_of(s * 2) && cover_side / (s * 2) > secret_side
            {
                s *= 2;
            }
            s
        };
        Ok(Self {
            name,
            cover_side,
            secret_side,
            channel_width,
            total_stride,
        })
    }

    /// 512 → 128, width 84: 1.5 bpp.
    pub fn low() -> Self {
        Self::new("low", 512, 128, 84).expect("builtin profile")
    }

    /// 512 → 256, width 104: 6 bpp.
    pub fn high() -> Self {
        Self::new("high", 512, 256, 104).expect("builtin profile")
    }

    /// 128 → 32 with a narrow decoder; same 1.5 bpp rate as `low`, sized for
    /// quick runs on a CPU.
    pub fn desk() -> Self {
        Self::new("desk", 128, 32, 32).expect("builtin profile")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let p = match name {
            "low" => Self::low(),
            "high" => Self::high(),
            "desk" => Self::desk(),
            "payload-0.375" => Self::new(name, 512, 64, 84).ok()?,
            "payload-13.5" => Self::new(name, 512, 384, 104).ok()?,
            "payload-24" => Self::new(name, 512, 512, 104).ok()?,
            _ => return None,
        };
        Some(p)
    }

    pub const BUILTIN_NAMES: [&'static str; 6] = [
        "desk",
        "low",
        "high",
        "payload-0.375",
        "payload-13.5",
        "payload-24",
    ];

    /// Secret bits (3 channels × 8 bits) per cover pixel.
    pub fn bpp(&self) -> f64 {
        24.0 * (self.secret_side * self.secret_side) as f64
            / (self.cover_side * self.cover_side) as f64
    }

    /// Per-block strides, twos first.
    pub fn strides(&self) -> [usize; HIDDEN_BLOCKS] {
        let mut out = [1; HIDDEN_BLOCKS];
        let twos = self.total_stride.trailing_zeros() as usize;
        for s in out.iter_mut().take(twos) {
            *s = 2;
        }
        out
    }

    pub fn needs_resample(&self) -> bool {
        self.cover_side / self.total_stride != self.secret_side
            || !self.cover_side.is_multiple_of(self.total_stride)
    }
}

impl fmt::Display for CapacityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (cover {}, secret {}, width {}, stride {}, {} bpp)",
            self.name,
            self.cover_side,
            self.secret_side,
            self.channel_width,
            self.total_stride,
            self.bpp()
        )
    }
}

#[derive(Debug)]
pub struct FixedDecoder {
    profile: CapacityProfile,
    weight_key: u64,
    hidden: Vec<Conv3x3>,
    output: Conv3x3,
    resample: Option<PlaneMap>,
    fingerprint: String,
}

/// Activations cached by one forward pass.
#[derive(Debug)]
pub struct GradientTape {
    fingerprint: String,
    input_shape: (usize, usize, usize),
    /// Input to each hidden conv, with its spatial dims.
    conv_inputs: Vec<(usize, usize)>,
    norms: Vec<NormCache>,
    activations: Vec<Tensor>,
    head_dims: (usize, usize),
    output: Tensor,
}

impl FixedDecoder {
    pub fn new(weight_key: u64, profile: &CapacityProfile) -> Result<Self> {
        let check = CapacityProfile::new(
            profile.name.clone(),
            profile.cover_side,
            profile.secret_side,
            profile.channel_width,
        )?;
        if check.total_stride != profile.total_stride {
            return Err(Error::InvalidParameter(format!(
                "profile '{}': stride {} inconsistent with sides {} -> {}",
                profile.name, profile.total_stride, profile.cover_side, profile.secret_side
            )));
        }
        let width = profile.channel_width;
        let mut hidden = Vec::with_capacity(HIDDEN_BLOCKS);
        let mut in_ch = 3;
        for (i, &stride) in profile.strides().iter().enumerate() {
            hidden.push(random_conv(weight_key, i, width, in_ch, stride));
            in_ch = width;
        }
        let output = random_conv(weight_key, HIDDEN_BLOCKS, 3, width, 1);
        let head = profile.cover_side / profile.total_stride;
        let resample = profile.needs_resample().then(|| {
            bilinear_resize((head, head), (profile.secret_side, profile.secret_side))
        });

        let mut hasher = Sha256::new();
        hasher.update(DECODER_VERSION.as_bytes());
        for conv in hidden.iter().chain(std::iter::once(&output)) {
            for w in &conv.weights {
                hasher.update(w.to_le_bytes());
            }
        }
        let fingerprint = hex::encode(hasher.finalize());

        Ok(Self {
            profile: profile.clone(),
            weight_key,
            hidden,
            output,
            resample,
            fingerprint,
        })
    }

    pub fn profile(&self) -> &CapacityProfile {
        &self.profile
    }

    pub fn weight_key(&self) -> u64 {
        self.weight_key
    }

    /// SHA-256 over every weight, little endian.
    pub fn weights_digest(&self) -> &str {
        &self.fingerprint
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv3x3> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    pub fn forward(&self, input: &Tensor) -> Result<(ImageTensor, GradientTape)> {
        let side = self.profile.cover_side;
        if input.shape() != (3, side, side) {
            return Err(Error::ShapeMismatch {
                left: input.shape(),
                right: (3, side, side),
            });
        }
        let mut conv_inputs = Vec::with_capacity(HIDDEN_BLOCKS);
        let mut norms = Vec::with_capacity(HIDDEN_BLOCKS);
        let mut activations = Vec::with_capacity(HIDDEN_BLOCKS);
        let mut x = input.clone();
        for conv in &self.hidden {
            conv_inputs.push((x.height(), x.width()));
            let norm = instance_norm(&conv.forward(&x));
            x = norm.normalized.map(leaky_relu);
            norms.push(norm);
            activations.push(x.clone());
        }
        let head_dims = (x.height(), x.width());
        let mut logits = self.output.forward(&x);
        if let Some(map) = &self.resample {
            logits = map.apply(&logits);
        }
        let out = logits.map(sigmoid);
        let tape = GradientTape {
            fingerprint: self.fingerprint.clone(),
            input_shape: input.shape(),
            conv_inputs,
            norms,
            activations,
            head_dims,
            output: out.clone(),
        };
        Ok((ImageTensor::new(out)?, tape))
    }

    /// Decode without keeping a tape.
    pub fn decode(&self, input: &Tensor) -> Result<ImageTensor> {
        Ok(self.forward(input)?.0)
    }

    /// Reverse-mode gradient of a scalar loss with respect to the input, given
    /// its gradient with respect to the output.
    pub fn input_gradient(&self, tape: GradientTape, upstream: &Tensor) -> Result<Tensor> {
        if tape.fingerprint != self.fingerprint {
            return Err(Error::StaleTape);
        }
        if upstream.shape() != tape.output.shape() {
            return Err(Error::ShapeMismatch {
                left: upstream.shape(),
                right: tape.output.shape(),
            });
        }
        let mut g = sigmoid_backward(&tape.output, upstream);
        if let Some(map) = &self.resample {
            g = map.adjoint(&g);
        }
        g = self
            .output
            .backward_input(&g, tape.head_dims.0, tape.head_dims.1);
        for i in (0..self.hidden.len()).rev() {
            g = leaky_relu_backward(&tape.activations[i], &g);
            g = instance_norm_backward(&tape.norms[i], &g);
            let (h, w) = tape.conv_inputs[i];
            g = self.hidden[i].backward_input(&g, h, w);
        }
        debug_assert_eq!(g.shape(), tape.input_shape);
        Ok(g)
    }
}

fn random_conv(key: u64, layer: usize, out_ch: usize, in_ch: usize, stride: usize) -> Conv3x3 {
    let mut stream = derive_stream(key, &format!("weights/layer{layer}"));
    let scale = (2.0 / (in_ch * 9) as f64).sqrt();
    Conv3x3 {
        out_channels: out_ch,
        in_channels: in_ch,
        stride,
        weights: (0..out_ch * in_ch * 9)
            .map(|_| stream.gaussian() * scale)
            .collect(),
    }
}

pub fn build_decoder(weight_key: u64, profile: &CapacityProfile) -> Result<FixedDecoder> {
    FixedDecoder::new(weight_key, profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_rates() {
        assert_eq!(CapacityProfile::low().bpp(), 1.5);
        assert_eq!(CapacityProfile::high().bpp(), 6.0);
        assert_eq!(CapacityProfile::desk().bpp(), 1.5);
        assert_eq!(CapacityProfile::builtin("payload-0.375").unwrap().bpp(), 0.375);
        assert_eq!(CapacityProfile::builtin("payload-13.5").unwrap().bpp(), 13.5);
        assert_eq!(CapacityProfile::builtin("payload-24").unwrap().bpp(), 24.0);
        assert!(CapacityProfile::builtin("nope").is_none());
    }

    #[test]
    fn stride_assignment() {
        assert_eq!(CapacityProfile::low().strides(), [2, 2, 1, 1]);
        assert_eq!(CapacityProfile::high().strides(), [2, 1, 1, 1]);
        let p = CapacityProfile::builtin("payload-0.375").unwrap();
        assert_eq!(p.strides(), [2, 2, 2, 1]);
        let p = CapacityProfile::builtin("payload-13.5").unwrap();
        assert_eq!(p.total_stride, 1);
        assert!(p.needs_resample());
        assert!(!CapacityProfile::low().needs_resample());
    }

    #[test]
    fn impossible_factorizations() {
        assert!(CapacityProfile::new("x", 96, 32, 8).is_err()); // stride 3
        assert!(CapacityProfile::new("x", 1024, 32, 8).is_err()); // stride 32
        assert!(CapacityProfile::new("x", 32, 64, 8).is_err());
        let mut p = CapacityProfile::new("x", 64, 16, 8).unwrap();
        p.total_stride = 2;
        assert!(FixedDecoder::new(1, &p).is_err());
    }

    #[test]
    fn zero_input_decodes_to_half() {
        let p = CapacityProfile::new("t", 32, 8, 6).unwrap();
        let dec = FixedDecoder::new(3, &p).unwrap();
        let (out, _) = dec.forward(&Tensor::zeros(3, 32, 32)).unwrap();
        assert_eq!(out.shape(), (3, 8, 8));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn resampling_profile_output_shape() {
        let p = CapacityProfile::new("t", 32, 24, 4).unwrap();
        let dec = FixedDecoder::new(3, &p).unwrap();
        let mut s = derive_stream(1, "x");
        let x = Tensor::from_fn(3, 32, 32, |_, _, _| s.gaussian() * 0.1);
        let (out, tape) = dec.forward(&x).unwrap();
        assert_eq!(out.shape(), (3, 24, 24));
        let g = dec
            .input_gradient(tape, &Tensor::filled(3, 24, 24, 1.0))
            .unwrap();
        assert_eq!(g.shape(), (3, 32, 32));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = CapacityProfile::new("t", 16, 8, 4).unwrap();
        let dec = FixedDecoder::new(7, &p).unwrap();
        let mut s = derive_stream(4, "fd");
        let x = Tensor::from_fn(3, 16, 16, |_, _, _| 0.05 * s.gaussian());
        let w = Tensor::from_fn(3, 8, 8, |_, _, _| s.gaussian());
        let loss = |t: &Tensor| -> f64 {
            let out = dec.decode(t).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = dec.forward(&x).unwrap();
        let g = dec.input_gradient(tape, &w).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            worst = worst.max((fd - g.data()[i]).abs() / g.max_abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn rejects_wrong_input_and_foreign_tape() {
        let p = CapacityProfile::new("t", 16, 8, 4).unwrap();
        let a = FixedDecoder::new(1, &p).unwrap();
        let b = FixedDecoder::new(2, &p).unwrap();
        assert!(a.forward(&Tensor::zeros(3, 8, 8)).is_err());
        let (_, tape) = a.forward(&Tensor::zeros(3, 16, 16)).unwrap();
        let err = b.input_gradient(tape, &Tensor::zeros(3, 8, 8)).unwrap_err();
        assert!(matches!(err, Error::StaleTape));
    }
}
