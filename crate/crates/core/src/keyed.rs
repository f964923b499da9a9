//! Key-derived determinism: seeded random streams, the procedural cover
//! generator, and externally supplied covers.
//!
//! Seeding recipe, fixed so independent implementations interoperate:
//!
//! * `state0 = seed XOR fnv1a64(tag)`, expanded into xoshiro256** state with
//!   SplitMix64.
//! * `uniform() = (next_u64() >> 11) · 2⁻⁵³`, in `[0, 1)`.
//! * `gaussian()` is Box–Muller on two consecutive uniforms
//!   `u1 = 1 − uniform()`, `u2 = uniform()`, yielding the cosine branch first
//!   and the sine branch on the following call.
//!
//! Transcendentals come from `libm` so results do not depend on the platform
//! math library.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{file_sha256, load_image, ImageTensor, Tensor};

/// Bumped whenever `generate_cover` output changes for any input.
pub const COVER_GENERATOR_VERSION: &str = "value-noise-v1";

/// Shared secrets from which both sides rebuild the cover and the decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMaterial {
    /// Cover key `k_c`.
    pub cover_key: u64,
    pub prompt: String,
    /// Decoder weight key `k_w`.
    pub weight_key: u64,
}

impl KeyMaterial {
    pub fn new(cover_key: u64, prompt: impl Into<String>, weight_key: u64) -> Self {
        Self {
            cover_key,
            prompt: prompt.into(),
            weight_key,
        }
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// One SplitMix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, domain-separated xoshiro256** stream.
#[derive(Clone, Debug)]
pub struct DeterministicStream {
    s: [u64; 4],
    spare_gaussian: Option<f64>,
}

impl DeterministicStream {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut sm = seed ^ fnv1a64(tag.as_bytes());
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self {
            s,
            spare_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

pub fn derive_stream(seed: u64, tag: &str) -> DeterministicStream {
    DeterministicStream::new(seed, tag)
}

/// Seed of the cover lattice: FNV-1a over `k_c` (little endian) then the
/// prompt bytes.
pub fn cover_seed(keys: &KeyMaterial) -> u64 {
    let mut bytes = keys.cover_key.to_le_bytes().to_vec();
    bytes.extend_from_slice(keys.prompt.as_bytes());
    fnv1a64(&bytes)
}

/// Bilinearly interpolated lattice of uniform values with spacing `cell`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(stream: &mut DeterministicStream, height: usize, width: usize, cell: usize) -> Self {
        let rows = height / cell + 2;
        let cols = width / cell + 2;
        let lattice = (0..rows * cols).map(|_| stream.uniform()).collect();
        Self {
            cell: cell as f64,
            cols,
            lattice,
        }
    }

    fn sample(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell;
        let fx = x as f64 / self.cell;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn smoothstep(edge0: f64, edge1: f64, v: f64) -> f64 {
    let t = ((v - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

const BASE_CELL: usize = 64;
const REGION_CELL: usize = 16;
const OCTAVE_CELLS: [usize; 4] = [8, 4, 2, 1];
const TEXTURE_AMPLITUDE: f64 = 0.45;

/// Keyed stand-in for a text-to-image model: a smooth colour field, a
/// four-octave value-noise texture, and a low-frequency region mask that
/// keeps about a third of the frame flat.
pub fn generate_cover(keys: &KeyMaterial, height: usize, width: usize) -> Result<ImageTensor> {
    if height < 32 || width < 32 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
        return Err(Error::Dimensions(format!(
            "cover must be at least 32x32 with sides divisible by 8, got {height}x{width}"
        )));
    }
    let seed = cover_seed(keys);

    let mut region_stream = derive_stream(seed, "cover/region");
    let region = ValueNoise::new(&mut region_stream, height, width, REGION_CELL);
    let mut region_values: Vec<f64> = (0..height * width)
        .map(|i| region.sample(i / width, i % width))
        .collect();
    let mut sorted = region_values.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let cut = sorted[sorted.len() * 35 / 100];
    for v in region_values.iter_mut() {
        *v = smoothstep(cut - 0.05, cut + 0.05, *v);
    }

    let amp_total: f64 = (0..OCTAVE_CELLS.len()).map(|o| 0.5f64.powi(o as i32)).sum();
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let mut base_stream = derive_stream(seed, &format!("cover/base/ch{c}"));
        let base = ValueNoise::new(&mut base_stream, height, width, BASE_CELL);
        let octaves: Vec<ValueNoise> = OCTAVE_CELLS
            .iter()
            .enumerate()
            .map(|(o, &cell)| {
                let mut s = derive_stream(seed, &format!("cover/octave{o}/ch{c}"));
                ValueNoise::new(&mut s, height, width, cell)
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let mut tex = 0.0;
                let mut amp = 1.0;
                for oct in &octaves {
                    tex += amp * oct.sample(y, x);
                    amp *= 0.5;
                }
                let tex = tex / amp_total - 0.5;
                let colour = 0.2 + 0.6 * base.sample(y, x);
                let weight = region_values[y * width + x];
                data.push((colour + TEXTURE_AMPLITUDE * weight * tex).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(Tensor::new(3, height, width, data)?)
}

/// A cover read from disk together with its content hash.
#[derive(Clone, Debug)]
pub struct ExternalCover {
    pub image: ImageTensor,
    pub sha256: String,
}

pub fn load_external_cover(path: impl AsRef<Path>) -> Result<ExternalCover> {
    let path = path.as_ref();
    let image = load_image(path)?;
    let sha256 = file_sha256(path)?;
    Ok(ExternalCover { image, sha256 })
}

/// Load an external cover and verify it against the hash the sender recorded.
pub fn load_verified_cover(path: impl AsRef<Path>, expected_sha256: &str) -> Result<ImageTensor> {
    let cover = load_external_cover(path)?;
    if !cover.sha256.eq_ignore_ascii_case(expected_sha256) {
        return Err(Error::HashMismatch {
            what: "external cover".into(),
            expected: expected_sha256.to_string(),
            found: cover.sha256,
        });
    }
    Ok(cover.image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn splitmix_and_xoshiro_reference_values() {
        // SplitMix64 from state 0.
        let mut st = 0u64;
        assert_eq!(splitmix64(&mut st), 0xe220a8397b1dcdaf);
        assert_eq!(splitmix64(&mut st), 0x6e789e6aa1b965f4);
        // xoshiro256** with state [1, 2, 3, 4].
        let mut x = DeterministicStream {
            s: [1, 2, 3, 4],
            spare_gaussian: None,
        };
        assert_eq!(x.next_u64(), 11520);
        assert_eq!(x.next_u64(), 0);
        assert_eq!(x.next_u64(), 1509978240);
        assert_eq!(x.next_u64(), 1215971899390074240);
    }

    #[test]
    fn streams_are_repeatable_and_tag_separated() {
        let mut a = derive_stream(0, "cover");
        let mut b = derive_stream(0, "cover");
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = derive_stream(0, "cover");
        let mut d = derive_stream(0, "weights");
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn gaussian_moments() {
        let mut s = derive_stream(42, "moments");
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| s.gaussian()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn uniform_range() {
        let mut s = derive_stream(7, "u");
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn cover_is_deterministic() {
        let k = KeyMaterial::new(5, "Campus", 1);
        let a = generate_cover(&k, 64, 96).unwrap();
        let b = generate_cover(&k, 64, 96).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 64, 96));
    }

    #[test]
    fn cover_keys_change_nearly_every_pixel() {
        let a = generate_cover(&KeyMaterial::new(1, "Campus", 0), 128, 128).unwrap();
        let b = generate_cover(&KeyMaterial::new(2, "Campus", 0), 128, 128).unwrap();
        let (_, h, w) = a.shape();
        let differing = (0..h * w)
            .filter(|&i| (0..3).any(|c| a.data()[c * h * w + i] != b.data()[c * h * w + i]))
            .count();
        assert!(differing as f64 >= 0.99 * (h * w) as f64, "{differing}");
        let p = generate_cover(&KeyMaterial::new(1, "Library", 0), 128, 128).unwrap();
        assert_ne!(a, p);
    }

    #[test]
    fn covers_mix_smooth_and_textured_blocks() {
        use crate::texture::{complexity_map, DEFAULT_THRESHOLD};
        for seed in 0..20u64 {
            let img = generate_cover(&KeyMaterial::new(seed, "Campus", 0), 128, 128).unwrap();
            let map = complexity_map(&img.quantize8(), 8).unwrap();
            let high = map.values.iter().filter(|&&o| o >= DEFAULT_THRESHOLD).count();
            assert!(high > 0 && high < map.values.len(), "seed {seed}: {high}");
        }
    }

    #[test]
    fn cover_rejects_bad_dimensions() {
        let k = KeyMaterial::new(1, "x", 1);
        assert!(generate_cover(&k, 16, 64).is_err());
        assert!(generate_cover(&k, 36, 64).is_err());
    }

    #[test]
    fn external_cover_hash_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = generate_cover(&KeyMaterial::new(3, "x", 0), 32, 32).unwrap();
        crate::image::save_image(&img, &p, 8).unwrap();
        let ext = load_external_cover(&p).unwrap();
        assert_eq!(ext.image.shape(), (3, 32, 32));
        assert!(load_verified_cover(&p, &ext.sha256).is_ok());
        let err = load_verified_cover(&p, &"0".repeat(64)).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
    }
}
