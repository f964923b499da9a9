//! Channel attacks applied to stego images, in two modes.
//!
//! [`apply_exact`] is what the channel does. [`apply_surrogate`] computes the
//! same forward result and also returns a [`SurrogateTape`] whose
//! `backward` propagates gradients: rounding steps pass gradients straight
//! through, clamping passes them inside `[-0.1, 1.1]`, and geometric attacks
//! backpropagate through their bilinear weights.

pub mod jpeg;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Tensor};
use crate::keyed::derive_stream;
use crate::resample::{bilinear_resize, gaussian_kernel, rotation, separable_pass, PlaneMap};

/// Straight-through window of the clamp.
pub const CLAMP_PASS_LOW: f64 = -0.1;
pub const CLAMP_PASS_HIGH: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Identity,
    Jpeg,
    GaussianNoise,
    Contrast,
    Scaling,
    Rotation,
    GaussianBlur,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Identity,
        AttackKind::Jpeg,
        AttackKind::GaussianNoise,
        AttackKind::Contrast,
        AttackKind::Scaling,
        AttackKind::Rotation,
        AttackKind::GaussianBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::Jpeg => "jpeg",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::Contrast => "contrast",
            AttackKind::Scaling => "scaling",
            AttackKind::Rotation => "rotation",
            AttackKind::GaussianBlur => "gaussian_blur",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match norm.as_str() {
            "identity" | "none" => AttackKind::Identity,
            "jpeg" => AttackKind::Jpeg,
            "gaussian_noise" | "noise" | "gaussian" => AttackKind::GaussianNoise,
            "contrast" => AttackKind::Contrast,
            "scaling" | "scale" => AttackKind::Scaling,
            "rotation" | "rotate" => AttackKind::Rotation,
            "gaussian_blur" | "blur" => AttackKind::GaussianBlur,
            _ => return Err(Error::InvalidParameter(format!("unknown attack kind '{s}'"))),
        };
        Ok(kind)
    }
}

/// One channel attack. `param` is the quality factor for JPEG, the noise
/// variance ρ, the contrast factor η, the scale factor s, the rotation angle
/// in radians, or the blur standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub param: f64,
    pub noise_seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, param: f64) -> Result<Self> {
        let spec = Self {
            kind,
            param,
            noise_seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self {
            kind: AttackKind::Identity,
            param: 0.0,
            noise_seed: 0,
        }
    }

    pub fn jpeg(quality: f64) -> Result<Self> {
        Self::new(AttackKind::Jpeg, quality)
    }

    pub fn gaussian_noise(variance: f64, seed: u64) -> Result<Self> {
        Ok(Self::new(AttackKind::GaussianNoise, variance)?.with_seed(seed))
    }

    pub fn contrast(eta: f64) -> Result<Self> {
        Self::new(AttackKind::Contrast, eta)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let bad = |why: &str| {
            Err(Error::InvalidParameter(format!(
                "{} parameter {p}: {why}",
                self.kind
            )))
        };
        if !p.is_finite() {
            return bad("must be finite");
        }
        match self.kind {
            AttackKind::Jpeg if !(1.0..=100.0).contains(&p) => bad("quality must be in [1, 100]"),
            AttackKind::GaussianNoise if p < 0.0 => bad("variance must be >= 0"),
            AttackKind::Contrast if p <= 0.0 => bad("factor must be > 0"),
            AttackKind::Scaling if p <= 0.0 => bad("scale must be > 0"),
            AttackKind::GaussianBlur if p < 0.0 => bad("sigma must be >= 0"),
            _ => Ok(()),
        }
    }

    /// True when the attack draws random numbers.
    pub fn is_stochastic(&self) -> bool {
        self.kind == AttackKind::GaussianNoise
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == AttackKind::Identity {
            f.write_str("identity")
        } else {
            write!(f, "{}:{}", self.kind, self.param)
        }
    }
}

/// Parses `kind:param`, e.g. `jpeg:80` or `gaussian_noise:0.01`.
impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (s, None),
        };
        let kind: AttackKind = kind.parse()?;
        let param = match (kind, param) {
            (AttackKind::Identity, _) => 0.0,
            (_, Some(p)) => p.trim().parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("bad attack parameter in '{s}'"))
            })?,
            (_, None) => {
                return Err(Error::InvalidParameter(format!(
                    "attack '{s}' needs a parameter, e.g. {kind}:0.5"
                )))
            }
        };
        Self::new(kind, param)
    }
}

/// Ordered attacks cycled through round-robin during robust optimization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackSuite {
    pub specs: Vec<AttackSpec>,
}

impl AttackSuite {
    pub fn new(specs: Vec<AttackSpec>) -> Self {
        Self { specs }
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn at_iteration(&self, t: usize) -> Option<&AttackSpec> {
        if self.specs.is_empty() {
            None
        } else {
            Some(&self.specs[t % self.specs.len()])
        }
    }

    pub fn contains_kind(&self, kind: AttackKind) -> bool {
        self.specs.iter().any(|s| s.kind == kind)
    }
}

impl fmt::Display for AttackSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.specs.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for AttackSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let specs = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { specs })
    }
}

/// Additive noise field with variance `variance`, drawn in planar order.
pub fn gaussian_noise_field(seed: u64, variance: f64, shape: (usize, usize, usize)) -> Tensor {
    let mut stream = derive_stream(seed, "attack/gaussian_noise");
    let sd = variance.sqrt();
    let (c, h, w) = shape;
    Tensor::from_fn(c, h, w, |_, _, _| sd * stream.gaussian())
}

/// Backward pass of one surrogate attack application.
#[derive(Debug)]
pub struct SurrogateTape {
    stage: Stage,
    /// Pre-clamp output, for the straight-through clamp window.
    pre_clamp: Tensor,
}

#[derive(Debug)]
enum Stage {
    Identity,
    Scale(f64),
    Maps(Vec<PlaneMap>),
    Jpeg,
}

impl SurrogateTape {
    pub fn backward(&self, upstream: &Tensor) -> Tensor {
        let g = upstream
            .zip_map(&self.pre_clamp, |g, v| {
                if (CLAMP_PASS_LOW..=CLAMP_PASS_HIGH).contains(&v) {
                    g
                } else {
                    0.0
                }
            })
            .expect("gradient shape matches attack output");
        match &self.stage {
            Stage::Identity => g,
            Stage::Scale(k) => g.scale(*k),
            Stage::Maps(maps) => maps.iter().rev().fold(g, |acc, m| m.adjoint(&acc)),
            Stage::Jpeg => jpeg::linear_adjoint(&g),
        }
    }
}

/// Forward result and tape. Identity passes through untouched.
pub fn apply_surrogate(spec: &AttackSpec, img: &Tensor) -> Result<(Tensor, SurrogateTape)> {
    spec.validate()?;
    let dims = (img.height(), img.width());
    let (pre, stage) = match spec.kind {
        AttackKind::Identity => {
            let tape = SurrogateTape {
                stage: Stage::Identity,
                pre_clamp: img.clone(),
            };
            return Ok((img.clone(), tape));
        }
        AttackKind::Jpeg => (
            jpeg::roundtrip_unclamped(img, spec.param.round() as u32, true),
            Stage::Jpeg,
        ),
        AttackKind::GaussianNoise => {
            let noise = gaussian_noise_field(spec.noise_seed, spec.param, img.shape());
            (img.add(&noise)?, Stage::Identity)
        }
        AttackKind::Contrast => {
            let eta = spec.param;
            // Written so that eta == 1 is an exact fixed point.
            (img.map(|v| eta * v + (1.0 - eta) * 0.5), Stage::Scale(eta))
        }
        AttackKind::Scaling => {
            let sh = ((dims.0 as f64 * spec.param).round() as usize).max(1);
            let sw = ((dims.1 as f64 * spec.param).round() as usize).max(1);
            let maps = vec![bilinear_resize(dims, (sh, sw)), bilinear_resize((sh, sw), dims)];
            (apply_maps(&maps, img), Stage::Maps(maps))
        }
        AttackKind::Rotation => {
            let maps = vec![rotation(dims, spec.param), rotation(dims, -spec.param)];
            (apply_maps(&maps, img), Stage::Maps(maps))
        }
        AttackKind::GaussianBlur => {
            let k = gaussian_kernel(spec.param);
            let maps = vec![separable_pass(dims, &k, true), separable_pass(dims, &k, false)];
            (apply_maps(&maps, img), Stage::Maps(maps))
        }
    };
    let out = pre.clamp_unit();
    Ok((
        out,
        SurrogateTape {
            stage,
            pre_clamp: pre,
        },
    ))
}

fn apply_maps(maps: &[PlaneMap], img: &Tensor) -> Tensor {
    maps.iter().fold(img.clone(), |acc, m| m.apply(&acc))
}

pub fn apply_exact(spec: &AttackSpec, img: &ImageTensor) -> Result<ImageTensor> {
    if spec.kind == AttackKind::Identity {
        spec.validate()?;
        return Ok(img.clone());
    }
    let (out, _) = apply_surrogate(spec, img.tensor())?;
    ImageTensor::new(out)
}
