//! Flat `key = value` run configuration.
//!
//! Every key is optional; absent keys take the defaults below. Unknown keys
//! are rejected so that a typo in a long sweep fails loudly instead of
//! silently running the default.
//!
//! | key | default |
//! |-----|---------|
//! | `cover_key`, `weight_key` | 0 |
//! | `prompt` | `Campus` |
//! | `profile` | `desk` |
//! | `cover_side`, `secret_side`, `channel_width` | from `profile` |
//! | `cover` | keyed cover (path to use an external one) |
//! | `block_size` | 8 |
//! | `threshold` | 4.5 |
//! | `alpha`, `gamma`, `floor`, `mu` | 1, 1e-5, 0.001, 0.2 |
//! | `beta` | 3 (clean) or 0.5 (robust) |
//! | `robust` | false |
//! | `suite` | `jpeg:80,gaussian_noise:0.01,contrast:0.7` |
//! | `iterations`, `halving_period`, `steganalysis_start` | 1500, 500, 1400 |
//! | `optimizer` | `adam` (`sgd` for plain projected descent) |
//! | `lr0` | 0.005 for `adam`, 10^-1.25 for `sgd` |
//! | `init_std`, `init_seed` | 0.01, 0 |
//! | `disable_localization`, `disable_rspg`, `disable_steganalysis_term` | false |
//! | `eval_attacks` | `identity:0,jpeg:80,gaussian_noise:0.01,contrast:0.7` |
//! | `eval_mode` | `any` (`known`, `unknown`) |
//! | `trials` | 1 |
//! | `output_dir` | unset |
//! | `secret_key` | 1 (generated secret when no file is given) |
//! | `denoise` | false |
//! | `key_recording` | `hash` (`plain` writes the keys into the manifest) |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::AttackSuite;
use crate::decoder::CapacityProfile;
use crate::error::{Error, Result};
use crate::keyed::KeyMaterial;
use crate::pipeline::{
    optimizer_by_name, Ablation, CoverSource, EmbedConfig, EvalMode, KeyRecording,
};
use crate::rspg::{LossConfig, Schedule};
use crate::texture::{DEFAULT_BLOCK_SIZE, DEFAULT_THRESHOLD};

pub const DEFAULT_PROMPT: &str = "Campus";
pub const DEFAULT_SUITE: &str = "jpeg:80,gaussian_noise:0.01,contrast:0.7";
pub const DEFAULT_EVAL_ATTACKS: &str = "identity:0,jpeg:80,gaussian_noise:0.01,contrast:0.7";

pub const KEYS: [&str; 34] = [
    "cover_key",
    "weight_key",
    "prompt",
    "profile",
    "cover_side",
    "secret_side",
    "channel_width",
    "cover",
    "block_size",
    "threshold",
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
    "eval_attacks",
    "eval_mode",
    "trials",
    "output_dir",
    "secret_key",
    "denoise",
    "key_recording",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub keys: KeyMaterial,
    pub profile: String,
    pub cover_side: Option<usize>,
    pub secret_side: Option<usize>,
    pub channel_width: Option<usize>,
    pub cover: Option<PathBuf>,
    pub block_size: usize,
    pub threshold: f64,
    pub alpha: f64,
    /// `None` means the mode default (3 clean, 0.5 robust).
    pub beta: Option<f64>,
    pub gamma: f64,
    pub floor: f64,
    pub mu: f64,
    pub robust: bool,
    pub suite: AttackSuite,
    pub schedule: Schedule,
    /// Whether `lr0` was given; otherwise it follows the optimizer.
    pub lr0_explicit: bool,
    pub ablation: Ablation,
    pub eval_attacks: AttackSuite,
    pub eval_mode: EvalMode,
    pub trials: usize,
    pub output_dir: Option<PathBuf>,
    /// Key of the generated test secret used when no secret file is given.
    pub secret_key: u64,
    pub denoise: bool,
    pub key_recording: KeyRecording,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            keys: KeyMaterial::new(0, DEFAULT_PROMPT, 0),
            profile: "desk".into(),
            cover_side: None,
            secret_side: None,
            channel_width: None,
            cover: None,
            block_size: DEFAULT_BLOCK_SIZE,
            threshold: DEFAULT_THRESHOLD,
            alpha: LossConfig::DEFAULT_ALPHA,
            beta: None,
            gamma: LossConfig::DEFAULT_GAMMA,
            floor: LossConfig::DEFAULT_FLOOR,
            mu: LossConfig::DEFAULT_BOUND,
            robust: false,
            suite: DEFAULT_SUITE.parse().expect("default suite"),
            schedule: Schedule::default(),
            lr0_explicit: false,
            ablation: Ablation::default(),
            eval_attacks: DEFAULT_EVAL_ATTACKS.parse().expect("default attacks"),
            eval_mode: EvalMode::Any,
            trials: 1,
            output_dir: None,
            secret_key: 1,
            denoise: false,
            key_recording: KeyRecording::Hash,
        }
    }
}

fn range_err(key: &str, message: impl Into<String>) -> Error {
    Error::OutOfRange {
        name: key.into(),
        message: message.into(),
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| range_err(key, format!("expected {what}, got '{value}'")))
}

fn positive_usize(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse_as(key, value, "a positive integer")?;
    if v == 0 {
        return Err(range_err(key, "must be at least 1"));
    }
    Ok(v)
}

fn finite(key: &str, value: &str, ok: impl Fn(f64) -> bool, rule: &str) -> Result<f64> {
    let v: f64 = parse_as(key, value, "a number")?;
    if !v.is_finite() || !ok(v) {
        return Err(range_err(key, format!("{value} violates {rule}")));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(range_err(key, format!("expected true or false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "cover_key" => self.keys.cover_key = parse_as(key, v, "an unsigned integer")?,
            "weight_key" => self.keys.weight_key = parse_as(key, v, "an unsigned integer")?,
            "prompt" => self.keys.prompt = v.to_string(),
            "profile" => {
                if CapacityProfile::builtin(v).is_none() {
                    return Err(range_err(
                        key,
                        format!(
                            "unknown profile '{v}' (known: {})",
                            CapacityProfile::BUILTIN_NAMES.join(", ")
                        ),
                    ));
                }
                self.profile = v.to_string();
            }
            "cover_side" => self.cover_side = Some(positive_usize(key, v)?),
            "secret_side" => self.secret_side = Some(positive_usize(key, v)?),
            "channel_width" => self.channel_width = Some(positive_usize(key, v)?),
            "cover" => self.cover = (!v.is_empty()).then(|| PathBuf::from(v)),
            "block_size" => self.block_size = positive_usize(key, v)?,
            "threshold" => self.threshold = finite(key, v, |x| x >= 0.0, "threshold >= 0")?,
            "alpha" => self.alpha = finite(key, v, |x| x >= 0.0, "alpha >= 0")?,
            "beta" => self.beta = Some(finite(key, v, |x| x >= 0.0, "beta >= 0")?),
            "gamma" => self.gamma = finite(key, v, |x| x >= 0.0, "gamma >= 0")?,
            "floor" => self.floor = finite(key, v, |x| x >= 0.0, "floor >= 0")?,
            "mu" => self.mu = finite(key, v, |x| x > 0.0 && x <= 1.0, "0 < mu <= 1")?,
            "robust" => self.robust = boolean(key, v)?,
            "suite" => {
                self.suite = v.parse().map_err(|e: Error| range_err(key, e.to_string()))?
            }
            "iterations" => self.schedule.iterations = positive_usize(key, v)?,
            "lr0" => {
                self.schedule.lr0 = finite(key, v, |x| x > 0.0, "lr0 > 0")?;
                self.lr0_explicit = true;
            }
            "halving_period" => {
                self.schedule.halving_period = parse_as(key, v, "a non-negative integer")?
            }
            "steganalysis_start" => {
                self.schedule.steganalysis_start = parse_as(key, v, "a non-negative integer")?
            }
            "optimizer" => {
                self.schedule.optimizer =
                    optimizer_by_name(v).map_err(|_| range_err(key, format!("unknown '{v}'")))?;
                if !self.lr0_explicit {
                    self.schedule.lr0 = self.schedule.optimizer.default_lr0();
                }
            }
            "init_std" => self.schedule.init_std = finite(key, v, |x| x >= 0.0, "init_std >= 0")?,
            "init_seed" => self.schedule.init_seed = parse_as(key, v, "an unsigned integer")?,
            "disable_localization" => self.ablation.disable_localization = boolean(key, v)?,
            "disable_rspg" => self.ablation.disable_rspg = boolean(key, v)?,
            "disable_steganalysis_term" => {
                self.ablation.disable_steganalysis_term = boolean(key, v)?
            }
            "eval_attacks" => {
                self.eval_attacks = v.parse().map_err(|e: Error| range_err(key, e.to_string()))?
            }
            "eval_mode" => {
                self.eval_mode = match v {
                    "known" => EvalMode::Known,
                    "unknown" => EvalMode::Unknown,
                    "any" => EvalMode::Any,
                    _ => return Err(range_err(key, format!("expected known, unknown or any, got '{v}'"))),
                }
            }
            "trials" => self.trials = positive_usize(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "secret_key" => self.secret_key = parse_as(key, v, "an unsigned integer")?,
            "denoise" => self.denoise = boolean(key, v)?,
            "key_recording" => {
                self.key_recording = v.parse().map_err(|e: Error| range_err(key, e.to_string()))?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn capacity_profile(&self) -> Result<CapacityProfile> {
        let base = CapacityProfile::builtin(&self.profile)
            .ok_or_else(|| range_err("profile", format!("unknown profile '{}'", self.profile)))?;
        if self.cover_side.is_none() && self.secret_side.is_none() && self.channel_width.is_none() {
            return Ok(base);
        }
        CapacityProfile::new(
            "custom",
            self.cover_side.unwrap_or(base.cover_side),
            self.secret_side.unwrap_or(base.secret_side),
            self.channel_width.unwrap_or(base.channel_width),
        )
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut loss = if self.robust {
            LossConfig::robust(self.suite.clone())
        } else {
            LossConfig::clean()
        };
        loss.alpha = self.alpha;
        if let Some(b) = self.beta {
            loss.beta = b;
        }
        loss.gamma = self.gamma;
        loss.floor = self.floor;
        loss.bound = self.mu;
        loss
    }

    pub fn embed_config(&self) -> Result<EmbedConfig> {
        let mut cfg = EmbedConfig::new(self.keys.clone(), self.capacity_profile()?);
        cfg.block_size = self.block_size;
        cfg.threshold = self.threshold;
        cfg.loss = self.loss_config();
        cfg.schedule = self.schedule.clone();
        cfg.cover_source = match &self.cover {
            Some(p) => CoverSource::External(p.clone()),
            None => CoverSource::Keyed,
        };
        cfg.ablation = self.ablation;
        cfg.key_recording = self.key_recording;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration as parseable text, every key spelled out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let loss = self.loss_config();
        let s = &self.schedule;
        line("cover_key", self.keys.cover_key.to_string());
        line("weight_key", self.keys.weight_key.to_string());
        line("prompt", self.keys.prompt.clone());
        line("profile", self.profile.clone());
        for (k, v) in [
            ("cover_side", self.cover_side),
            ("secret_side", self.secret_side),
            ("channel_width", self.channel_width),
        ] {
            if let Some(v) = v {
                line(k, v.to_string());
            }
        }
        if let Some(c) = &self.cover {
            line("cover", c.display().to_string());
        }
        line("block_size", self.block_size.to_string());
        line("threshold", self.threshold.to_string());
        line("alpha", loss.alpha.to_string());
        line("beta", loss.beta.to_string());
        line("gamma", loss.gamma.to_string());
        line("floor", loss.floor.to_string());
        line("mu", loss.bound.to_string());
        line("robust", self.robust.to_string());
        line("suite", self.suite.to_string());
        line("iterations", s.iterations.to_string());
        line("lr0", s.lr0.to_string());
        line("halving_period", s.halving_period.to_string());
        line("steganalysis_start", s.steganalysis_start.to_string());
        line("optimizer", s.optimizer.name().to_string());
        line("init_std", s.init_std.to_string());
        line("init_seed", s.init_seed.to_string());
        line("disable_localization", self.ablation.disable_localization.to_string());
        line("disable_rspg", self.ablation.disable_rspg.to_string());
        line(
            "disable_steganalysis_term",
            self.ablation.disable_steganalysis_term.to_string(),
        );
        line("eval_attacks", self.eval_attacks.to_string());
        line(
            "eval_mode",
            match self.eval_mode {
                EvalMode::Known => "known",
                EvalMode::Unknown => "unknown",
                EvalMode::Any => "any",
            }
            .to_string(),
        );
        line("trials", self.trials.to_string());
        if let Some(d) = &self.output_dir {
            line("output_dir", d.display().to_string());
        }
        line("secret_key", self.secret_key.to_string());
        line("denoise", self.denoise.to_string());
        line("key_recording", self.key_recording.name().to_string());
        out
    }
}

impl RunConfig {
    /// `to_text` for storing next to a stego: the key lines are dropped
    /// unless keys are recorded in plain.
    pub fn to_record_text(&self) -> String {
        let text = self.to_text();
        if self.key_recording == KeyRecording::Plain {
            return text;
        }
        text.lines()
            .filter(|l| {
                let k = l.split('=').next().unwrap_or("").trim();
                !matches!(k, "cover_key" | "weight_key" | "prompt")
            })
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

/// Parse configuration text on top of the defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
