//! Sender and receiver protocol: embed a secret into a keyed (or supplied)
//! cover, extract it again, and evaluate the round trip under attacks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attack::{apply_exact, AttackSpec, AttackSuite};
use crate::decoder::{build_decoder, CapacityProfile, DECODER_VERSION};
use crate::error::{Error, Result};
use crate::image::{pixel_sha256, ImageTensor, Tensor};
use crate::keyed::{generate_cover, load_external_cover, KeyMaterial, COVER_GENERATOR_VERSION};
use crate::metrics::QualityReport;
use crate::rspg::{
    optimize_perturbation, BuiltInDetector, LossConfig, OptimizationResult, Optimizer, Schedule,
    Steganalyzer,
};
use crate::texture::{
    select_blocks, BlockMask, ComplexityMap, DEFAULT_BLOCK_SIZE, DEFAULT_THRESHOLD,
};

pub const MANIFEST_FORMAT: &str = "rfnns-manifest-1";

/// Header of the `evaluate` CSV.
pub const EVAL_CSV_HEADER: &str =
    "attack,param,trial,stego_psnr,stego_ssim,secret_psnr,secret_ssim,secret_mse";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoverSource {
    Keyed,
    External(PathBuf),
}

/// Switches for the two ablation arms plus the steganalysis term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Embed over the whole frame instead of textured blocks only.
    pub disable_localization: bool,
    /// Plain clean-mode optimization: no attack simulation, no steganalysis.
    pub disable_rspg: bool,
    pub disable_steganalysis_term: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub keys: KeyMaterial,
    pub profile: CapacityProfile,
    pub block_size: usize,
    pub threshold: f64,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub cover_source: CoverSource,
    pub ablation: Ablation,
    pub key_recording: KeyRecording,
}

impl EmbedConfig {
    pub fn new(keys: KeyMaterial, profile: CapacityProfile) -> Self {
        Self {
            keys,
            profile,
            block_size: DEFAULT_BLOCK_SIZE,
            threshold: DEFAULT_THRESHOLD,
            loss: LossConfig::clean(),
            schedule: Schedule::default(),
            cover_source: CoverSource::Keyed,
            ablation: Ablation::default(),
            key_recording: KeyRecording::default(),
        }
    }

    /// Loss configuration after ablation switches are applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.ablation.disable_rspg {
            loss.robust = false;
            loss.beta = LossConfig::BETA_CLEAN;
            loss.suite = AttackSuite::default();
            loss.gamma = 0.0;
        }
        if self.ablation.disable_steganalysis_term {
            loss.gamma = 0.0;
        }
        loss
    }

    pub fn validate(&self) -> Result<()> {
        if !self.profile.cover_side.is_multiple_of(self.block_size) || self.block_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "cover side {} is not divisible by block size {}",
                self.profile.cover_side, self.block_size
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::OutOfRange {
                name: "threshold".into(),
                message: format!("{}", self.threshold),
            });
        }
        let p = &self.keys.prompt;
        if self.key_recording == KeyRecording::Plain && (p.trim() != p || p.contains(['\n', '\r'])) {
            return Err(Error::InvalidParameter(
                "a plainly recorded prompt cannot have surrounding whitespace or line breaks".into(),
            ));
        }
        self.effective_loss().validate()?;
        self.schedule.validate()
    }
}

/// Cover, texture map and mask as both sides compute them.
#[derive(Clone, Debug)]
pub struct PreparedCover {
    /// 8-bit quantized cover.
    pub cover: ImageTensor,
    pub complexity: ComplexityMap,
    pub mask: BlockMask,
}

fn obtain_cover(keys: &KeyMaterial, source: &CoverSource, side: usize) -> Result<ImageTensor> {
    let img = match source {
        CoverSource::Keyed => generate_cover(keys, side, side)?,
        CoverSource::External(path) => {
            let ext = load_external_cover(path)?;
            if ext.image.shape() != (3, side, side) {
                return Err(Error::ShapeMismatch {
                    left: ext.image.shape(),
                    right: (3, side, side),
                });
            }
            ext.image
        }
    };
    Ok(img.quantize8())
}

pub fn prepare_cover(
    keys: &KeyMaterial,
    source: &CoverSource,
    profile: &CapacityProfile,
    block_size: usize,
    threshold: f64,
    localization: bool,
) -> Result<PreparedCover> {
    let cover = obtain_cover(keys, source, profile.cover_side)?;
    let (complexity, mut mask) = select_blocks(&cover, block_size, threshold)?;
    if !localization {
        mask = BlockMask::full(mask.grid);
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask { threshold });
    }
    Ok(PreparedCover {
        cover,
        complexity,
        mask,
    })
}

/// `quantize8(clamp(cover + delta))`.
pub fn compose_stego(cover: &ImageTensor, delta: &Tensor) -> Result<ImageTensor> {
    Ok(ImageTensor::from_clamped(&cover.tensor().add(delta)?).quantize8())
}

/// How a manifest records the key material.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KeyRecording {
    /// SHA-256 digests only; the receiver must bring the keys.
    #[default]
    Hash,
    Plain,
}

impl KeyRecording {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hash => "hash",
            Self::Plain => "plain",
        }
    }
}

impl std::str::FromStr for KeyRecording {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(Self::Hash),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::InvalidParameter(format!(
                "key recording must be hash or plain, got '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeyRecord {
    Plain(KeyMaterial),
    Hashed {
        cover_key: String,
        prompt: String,
        weight_key: String,
    },
}

fn tagged_sha256(tag: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    hex::encode(h.finalize())
}

impl KeyRecord {
    pub fn new(keys: &KeyMaterial, mode: KeyRecording) -> Self {
        match mode {
            KeyRecording::Plain => Self::Plain(keys.clone()),
            KeyRecording::Hash => {
                let [cover_key, prompt, weight_key] = Self::digests(keys);
                Self::Hashed {
                    cover_key,
                    prompt,
                    weight_key,
                }
            }
        }
    }

    pub fn mode(&self) -> KeyRecording {
        match self {
            Self::Plain(_) => KeyRecording::Plain,
            Self::Hashed { .. } => KeyRecording::Hash,
        }
    }

    /// Digests of `k_c`, the prompt and `k_w`, in that order.
    pub fn digests(keys: &KeyMaterial) -> [String; 3] {
        [
            tagged_sha256("cover_key", &keys.cover_key.to_le_bytes()),
            tagged_sha256("prompt", keys.prompt.as_bytes()),
            tagged_sha256("weight_key", &keys.weight_key.to_le_bytes()),
        ]
    }

    /// Fails on the first key that differs from the record.
    pub fn check(&self, keys: &KeyMaterial) -> Result<()> {
        match self {
            Self::Plain(k) => {
                let differs = [
                    ("cover_key", k.cover_key != keys.cover_key),
                    ("prompt", k.prompt != keys.prompt),
                    ("weight_key", k.weight_key != keys.weight_key),
                ];
                match differs.iter().find(|(_, d)| *d) {
                    Some((what, _)) => Err(Error::KeyMismatch {
                        what: (*what).into(),
                    }),
                    None => Ok(()),
                }
            }
            Self::Hashed {
                cover_key,
                prompt,
                weight_key,
            } => {
                let [c, p, w] = Self::digests(keys);
                check_hash("cover_key", cover_key, c)?;
                check_hash("prompt", prompt, p)?;
                check_hash("weight_key", weight_key, w)
            }
        }
    }
}

/// Everything the receiver needs to check and decode a stego, given the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub keys: KeyRecord,
    pub profile: CapacityProfile,
    pub block_size: usize,
    pub threshold: f64,
    pub localization: bool,
    /// `None` for keyed covers.
    pub external_cover: Option<String>,
    pub cover_sha256: String,
    pub mask_sha256: String,
    pub mask_blocks: usize,
    pub stego_sha256: String,
    /// Loss, schedule and ablation settings, echoed for reproducibility.
    pub settings: BTreeMap<String, String>,
}

const MANIFEST_KEYS: [&str; 23] = [
    "format",
    "cover_generator",
    "decoder",
    "key_recording",
    "cover_key",
    "prompt",
    "weight_key",
    "cover_key_sha256",
    "prompt_sha256",
    "weight_key_sha256",
    "profile",
    "cover_side",
    "secret_side",
    "channel_width",
    "total_stride",
    "block_size",
    "threshold",
    "localization",
    "cover_source",
    "cover_sha256",
    "mask_sha256",
    "mask_blocks",
    "stego_sha256",
];

const SETTING_KEYS: [&str; 17] = [
    "alpha",
    "beta",
    "gamma",
    "floor",
    "mu",
    "robust",
    "suite",
    "iterations",
    "lr0",
    "halving_period",
    "steganalysis_start",
    "optimizer",
    "init_std",
    "init_seed",
    "disable_localization",
    "disable_rspg",
    "disable_steganalysis_term",
];

fn settings_snapshot(cfg: &EmbedConfig) -> BTreeMap<String, String> {
    let loss = cfg.effective_loss();
    let s = &cfg.schedule;
    let a = &cfg.ablation;
    let entries = [
        ("alpha", loss.alpha.to_string()),
        ("beta", loss.beta.to_string()),
        ("gamma", loss.gamma.to_string()),
        ("floor", loss.floor.to_string()),
        ("mu", loss.bound.to_string()),
        ("robust", loss.robust.to_string()),
        ("suite", loss.suite.to_string()),
        ("iterations", s.iterations.to_string()),
        ("lr0", s.lr0.to_string()),
        ("halving_period", s.halving_period.to_string()),
        ("steganalysis_start", s.steganalysis_start.to_string()),
        ("optimizer", s.optimizer.name().to_string()),
        ("init_std", s.init_std.to_string()),
        ("init_seed", s.init_seed.to_string()),
        ("disable_localization", a.disable_localization.to_string()),
        ("disable_rspg", a.disable_rspg.to_string()),
        ("disable_steganalysis_term", a.disable_steganalysis_term.to_string()),
    ];
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

impl Manifest {
    /// UTF-8, one `key = value` per line, `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let p = &self.profile;
        line("format", &MANIFEST_FORMAT);
        line("cover_generator", &COVER_GENERATOR_VERSION);
        line("decoder", &DECODER_VERSION);
        line("key_recording", &self.keys.mode().name());
        match &self.keys {
            KeyRecord::Plain(k) => {
                line("cover_key", &k.cover_key);
                line("prompt", &k.prompt);
                line("weight_key", &k.weight_key);
            }
            KeyRecord::Hashed {
                cover_key,
                prompt,
                weight_key,
            } => {
                line("cover_key_sha256", cover_key);
                line("prompt_sha256", prompt);
                line("weight_key_sha256", weight_key);
            }
        }
        line("profile", &p.name);
        line("cover_side", &p.cover_side);
        line("secret_side", &p.secret_side);
        line("channel_width", &p.channel_width);
        line("total_stride", &p.total_stride);
        line("block_size", &self.block_size);
        line("threshold", &self.threshold);
        line("localization", &self.localization);
        match &self.external_cover {
            None => line("cover_source", &"keyed"),
            Some(name) => line("cover_source", &format!("external:{name}")),
        }
        line("cover_sha256", &self.cover_sha256);
        line("mask_sha256", &self.mask_sha256);
        line("mask_blocks", &self.mask_blocks);
        line("stego_sha256", &self.stego_sha256);
        for (k, v) in &self.settings {
            line(k, v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !MANIFEST_KEYS.contains(&k) && !SETTING_KEYS.contains(&k) {
                return Err(Error::Manifest(format!("line {}: unknown key '{k}'", n + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Manifest(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Manifest(format!("missing key '{k}'")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Manifest(format!("bad value for '{k}': {v}")))
        }
        let expect = |k: &str, want: &str| -> Result<()> {
            let got = get(k)?;
            if got != want {
                return Err(Error::Manifest(format!(
                    "{k} is '{got}', this build reads '{want}'"
                )));
            }
            Ok(())
        };
        expect("format", MANIFEST_FORMAT)?;
        expect("cover_generator", COVER_GENERATOR_VERSION)?;
        expect("decoder", DECODER_VERSION)?;

        let profile = CapacityProfile::new(
            get("profile")?,
            num("cover_side", get("cover_side")?)?,
            num("secret_side", get("secret_side")?)?,
            num("channel_width", get("channel_width")?)?,
        )
        .map_err(|e| Error::Manifest(e.to_string()))?;
        let stride: usize = num("total_stride", get("total_stride")?)?;
        if stride != profile.total_stride {
            return Err(Error::Manifest(format!(
                "total_stride {stride} is inconsistent with the profile sides (expected {})",
                profile.total_stride
            )));
        }
        let external_cover = match get("cover_source")? {
            "keyed" => None,
            s => match s.strip_prefix("external:") {
                Some(name) => Some(name.to_string()),
                None => return Err(Error::Manifest(format!("bad cover_source '{s}'"))),
            },
        };
        let hash = |k: &str| -> Result<String> {
            let v = get(k)?;
            if v.len() != 64 || !v.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::Manifest(format!("{k} is not a sha256 hex digest")));
            }
            Ok(v.to_ascii_lowercase())
        };
        let keys = match get("key_recording")?.parse::<KeyRecording>() {
            Ok(KeyRecording::Plain) => KeyRecord::Plain(KeyMaterial::new(
                num("cover_key", get("cover_key")?)?,
                get("prompt")?,
                num("weight_key", get("weight_key")?)?,
            )),
            Ok(KeyRecording::Hash) => KeyRecord::Hashed {
                cover_key: hash("cover_key_sha256")?,
                prompt: hash("prompt_sha256")?,
                weight_key: hash("weight_key_sha256")?,
            },
            Err(e) => return Err(Error::Manifest(e.to_string())),
        };
        let wrong_mode = match keys {
            KeyRecord::Plain(_) => ["cover_key_sha256", "prompt_sha256", "weight_key_sha256"],
            KeyRecord::Hashed { .. } => ["cover_key", "prompt", "weight_key"],
        };
        if let Some(k) = wrong_mode.iter().find(|k| map.contains_key(**k)) {
            return Err(Error::Manifest(format!(
                "'{k}' does not belong to key_recording = {}",
                keys.mode().name()
            )));
        }
        let settings = map
            .iter()
            .filter(|(k, _)| SETTING_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            keys,
            block_size: num("block_size", get("block_size")?)?,
            threshold: num("threshold", get("threshold")?)?,
            localization: num("localization", get("localization")?)?,
            external_cover,
            cover_sha256: hash("cover_sha256")?,
            mask_sha256: hash("mask_sha256")?,
            mask_blocks: num("mask_blocks", get("mask_blocks")?)?,
            stego_sha256: hash("stego_sha256")?,
            settings,
            profile,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EmbedOutcome {
    pub stego: ImageTensor,
    pub manifest: Manifest,
    pub prepared: PreparedCover,
    pub optimization: OptimizationResult,
}

pub fn embed(secret: &ImageTensor, cfg: &EmbedConfig) -> Result<EmbedOutcome> {
    cfg.validate()?;
    let side = cfg.profile.secret_side;
    if secret.shape() != (3, side, side) {
        return Err(Error::ShapeMismatch {
            left: secret.shape(),
            right: (3, side, side),
        });
    }
    let prepared = prepare_cover(
        &cfg.keys,
        &cfg.cover_source,
        &cfg.profile,
        cfg.block_size,
        cfg.threshold,
        !cfg.ablation.disable_localization,
    )?;
    let decoder = build_decoder(cfg.keys.weight_key, &cfg.profile)?;
    let loss = cfg.effective_loss();
    let detector = BuiltInDetector::default();
    let plugin: Option<&dyn Steganalyzer> = if loss.gamma > 0.0 {
        Some(&detector)
    } else {
        None
    };
    let optimization = optimize_perturbation(
        &prepared.cover,
        secret,
        &prepared.mask,
        &decoder,
        &loss,
        &cfg.schedule,
        plugin,
    )?;
    let stego = compose_stego(&prepared.cover, &optimization.delta)?;
    let manifest = Manifest {
        keys: KeyRecord::new(&cfg.keys, cfg.key_recording),
        profile: cfg.profile.clone(),
        block_size: cfg.block_size,
        threshold: cfg.threshold,
        localization: !cfg.ablation.disable_localization,
        external_cover: match &cfg.cover_source {
            CoverSource::Keyed => None,
            CoverSource::External(p) => Some(
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            ),
        },
        cover_sha256: pixel_sha256(&prepared.cover),
        mask_sha256: prepared.mask.digest(),
        mask_blocks: prepared.mask.count(),
        stego_sha256: pixel_sha256(&stego),
        settings: settings_snapshot(cfg),
    };
    Ok(EmbedOutcome {
        stego,
        manifest,
        prepared,
        optimization,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Required when the manifest names an external cover.
    pub external_cover: Option<PathBuf>,
    /// 3×3 box blur on the recovered secret.
    pub denoise: bool,
    /// Refuse stegos whose pixels differ from the embedded ones.
    pub verify_stego: bool,
}

fn box_blur3(img: &ImageTensor) -> ImageTensor {
    let t = img.tensor();
    let (h, w) = (t.height() as isize, t.width() as isize);
    let out = Tensor::from_fn(t.channels(), t.height(), t.width(), |c, y, x| {
        let mut acc = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                acc += t.get(c, yy, xx);
            }
        }
        acc / 9.0
    });
    ImageTensor::from_clamped(&out)
}

fn check_hash(what: &str, expected: &str, found: String) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch {
            what: what.into(),
            expected: expected.into(),
            found,
        });
    }
    Ok(())
}

/// Check the keys against the manifest, rebuild the cover and mask, verify
/// their hashes, and decode the perturbation carried by `stego`.
pub fn extract(
    stego: &ImageTensor,
    manifest: &Manifest,
    keys: &KeyMaterial,
    opts: &ExtractOptions,
) -> Result<ImageTensor> {
    let side = manifest.profile.cover_side;
    if stego.shape() != (3, side, side) {
        return Err(Error::ShapeMismatch {
            left: stego.shape(),
            right: (3, side, side),
        });
    }
    manifest.keys.check(keys)?;
    if opts.verify_stego {
        check_hash("stego", &manifest.stego_sha256, pixel_sha256(stego))?;
    }
    let source = match &manifest.external_cover {
        None => CoverSource::Keyed,
        Some(name) => match &opts.external_cover {
            Some(p) => CoverSource::External(p.clone()),
            None => {
                return Err(Error::Manifest(format!(
                    "stego was embedded in external cover '{name}'; supply that file"
                )))
            }
        },
    };
    let prepared = prepare_cover(
        keys,
        &source,
        &manifest.profile,
        manifest.block_size,
        manifest.threshold,
        manifest.localization,
    )?;
    check_hash("cover", &manifest.cover_sha256, pixel_sha256(&prepared.cover))?;
    check_hash("mask", &manifest.mask_sha256, prepared.mask.digest())?;

    let mut delta = stego.quantize8().tensor().sub(prepared.cover.tensor())?;
    prepared.mask.apply(&mut delta);
    let decoder = build_decoder(keys.weight_key, &manifest.profile)?;
    let secret = decoder.decode(&delta)?;
    Ok(if opts.denoise {
        box_blur3(&secret)
    } else {
        secret
    })
}

/// Whether evaluation attacks are drawn from the training suite or held out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Known,
    Unknown,
    /// No membership check.
    Any,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub attack: AttackSpec,
    pub trial: usize,
    pub stego: QualityReport,
    pub secret: QualityReport,
}

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.8}",
            self.attack.kind.name(),
            self.attack.param,
            self.trial,
            self.stego.psnr,
            self.stego.ssim,
            self.secret.psnr,
            self.secret.ssim,
            self.secret.mse
        )
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn check_mode(mode: EvalMode, training: &AttackSuite, attacks: &AttackSuite) -> Result<()> {
    for a in &attacks.specs {
        let known = training.contains_kind(a.kind);
        let bad = match mode {
            EvalMode::Known => !known,
            EvalMode::Unknown => known,
            EvalMode::Any => false,
        };
        if bad {
            return Err(Error::Config(format!(
                "attack {a} violates {} mode for training suite '{training}'",
                if mode == EvalMode::Known { "known" } else { "unknown" }
            )));
        }
    }
    Ok(())
}

/// Per trial: embed `secrets[trial % len]` under cover key `k_c + trial`,
/// then run every attack on the stego and extract. Rows come back ordered by
/// (attack, trial).
pub fn evaluate(
    cfg: &EmbedConfig,
    secrets: &[ImageTensor],
    attacks: &AttackSuite,
    trials: usize,
    mode: EvalMode,
) -> Result<Vec<EvalRow>> {
    if secrets.is_empty() || trials == 0 || attacks.is_empty() {
        return Err(Error::InvalidParameter(
            "evaluation needs secrets, attacks and at least one trial".into(),
        ));
    }
    for a in &attacks.specs {
        a.validate()?;
    }
    check_mode(mode, &cfg.effective_loss().suite, attacks)?;

    let per_trial: Vec<Vec<EvalRow>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut c = cfg.clone();
            c.keys.cover_key = cfg.keys.cover_key.wrapping_add(trial as u64);
            let secret = &secrets[trial % secrets.len()];
            let out = embed(secret, &c)?;
            let stego_q = QualityReport::compare(&out.prepared.cover, &out.stego)?;
            attacks
                .specs
                .iter()
                .map(|spec| {
                    let spec = if spec.is_stochastic() {
                        spec.with_seed(spec.noise_seed.wrapping_add(trial as u64))
                    } else {
                        *spec
                    };
                    let received = apply_exact(&spec, &out.stego)?;
                    let rec = extract(&received, &out.manifest, &c.keys, &ExtractOptions {
                        external_cover: match &c.cover_source {
                            CoverSource::External(p) => Some(p.clone()),
                            CoverSource::Keyed => None,
                        },
                        ..ExtractOptions::default()
                    })?;
                    Ok(EvalRow {
                        attack: spec,
                        trial,
                        stego: stego_q,
                        secret: QualityReport::compare(secret, &rec)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(trials * attacks.len());
    for a in 0..attacks.len() {
        for trial_rows in &per_trial {
            rows.push(trial_rows[a].clone());
        }
    }
    Ok(rows)
}

/// Square RGB test secret standing in for a downsampled photograph: a smooth
/// colour field, mid-scale texture, and a few hard-edged discs, stretched to
/// the full intensity range. Deterministic in `key`.
pub fn demo_secret(key: u64, side: usize) -> Result<ImageTensor> {
    use crate::keyed::derive_stream;
    if side < 4 {
        return Err(Error::Dimensions(format!("secret side {side} is too small")));
    }
    let mut s = derive_stream(key, "secret");
    let lattice = |s: &mut crate::keyed::DeterministicStream, cell: usize| {
        let n = side / cell + 2;
        let vals: Vec<f64> = (0..n * n).map(|_| s.uniform()).collect();
        move |y: usize, x: usize| {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |r: usize, c: usize| vals[r * n + c];
            (at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx) * (1.0 - ty)
                + (at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx) * ty
        }
    };
    let base_cell = (side / 2).max(2);
    let mut fields = Vec::new();
    for _ in 0..3 {
        let base = lattice(&mut s, base_cell);
        let mid = lattice(&mut s, (side / 8).max(2));
        let fine = lattice(&mut s, (side / 16).max(2));
        fields.push((base, mid, fine));
    }
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let cy = s.uniform() * side as f64;
            let cx = s.uniform() * side as f64;
            let r = (0.08 + 0.17 * s.uniform()) * side as f64;
            (cy, cx, r, [s.uniform(), s.uniform(), s.uniform()])
        })
        .collect();
    let mut t = Tensor::from_fn(3, side, side, |c, y, x| {
        let (base, mid, fine) = &fields[c];
        let mut v = 0.6 * base(y, x) + 0.25 * mid(y, x) + 0.15 * fine(y, x);
        for (cy, cx, r, col) in &discs {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                v = 0.5 * v + 0.5 * col[c];
            }
        }
        v
    });
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    t = t.map(|v| (v - lo) / span);
    Ok(ImageTensor::from_clamped(&t).quantize8())
}

/// Optimizer selection helper for configuration front ends.
pub fn optimizer_by_name(name: &str) -> Result<Optimizer> {
    Optimizer::from_name(name).ok_or_else(|| Error::OutOfRange {
        name: "optimizer".into(),
        message: format!("unknown optimizer '{name}' (expected sgd or adam)"),
    })
}
