//! Robust steganographic perturbation generation.
//!
//! Four losses drive the perturbation: its energy over the embedding support
//! (L1), clean recovery error (L2), recovery error after a simulated channel
//! attack (L3), and a steganalyzer's cross-entropy toward the "normal" class
//! (L4). [`objective`] combines them with a floor on L1: once the
//! perturbation energy drops below `Y` it stops being penalized.

mod detector;
mod optimizer;

pub use detector::{BuiltInDetector, Steganalyzer, KV_KERNEL};
pub use optimizer::{
    optimize_perturbation, optimize_perturbation_with, IterationView, LossRecord,
    OptimizationResult, Optimizer,
};

use crate::attack::AttackSuite;
use crate::error::{Error, Result};
use crate::image::Tensor;

/// Logit index meaning "stego".
pub const LABEL_STEGO: usize = 0;
/// Logit index meaning "normal"; the target of L4.
pub const LABEL_NORMAL: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Perturbation-energy floor `Y`.
    pub floor: f64,
    /// Per-element bound `μ` on the perturbation.
    pub bound: f64,
    pub robust: bool,
    pub suite: AttackSuite,
}

impl LossConfig {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_GAMMA: f64 = 1e-5;
    pub const DEFAULT_FLOOR: f64 = 0.001;
    pub const DEFAULT_BOUND: f64 = 0.2;
    pub const BETA_CLEAN: f64 = 3.0;
    pub const BETA_ROBUST: f64 = 0.5;

    /// Attack-free defaults: β = 3, L3 disabled.
    pub fn clean() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::BETA_CLEAN,
            gamma: Self::DEFAULT_GAMMA,
            floor: Self::DEFAULT_FLOOR,
            bound: Self::DEFAULT_BOUND,
            robust: false,
            suite: AttackSuite::default(),
        }
    }

    /// Robust defaults: β = 0.5 so clean and attacked recovery weigh equally.
    pub fn robust(suite: AttackSuite) -> Self {
        Self {
            beta: Self::BETA_ROBUST,
            robust: true,
            suite,
            ..Self::clean()
        }
    }

    /// L3 only participates in robust mode with β ≤ 1; otherwise its
    /// coefficient (1 − β) would be negative.
    pub fn uses_attack_loss(&self) -> bool {
        self.robust && self.beta <= 1.0 && !self.suite.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, ok: bool| {
            if !v.is_finite() || !ok {
                Err(Error::OutOfRange {
                    name: name.into(),
                    message: format!("{v}"),
                })
            } else {
                Ok(())
            }
        };
        check("alpha", self.alpha, self.alpha >= 0.0)?;
        check("beta", self.beta, self.beta >= 0.0)?;
        check("gamma", self.gamma, self.gamma >= 0.0)?;
        check("floor", self.floor, self.floor >= 0.0)?;
        check("mu", self.bound, self.bound > 0.0)?;
        if self.robust && self.suite.is_empty() {
            return Err(Error::Config("robust mode needs a non-empty attack suite".into()));
        }
        for s in &self.suite.specs {
            s.validate()?;
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::clean()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub lr0: f64,
    pub halving_period: usize,
    pub steganalysis_start: usize,
    pub optimizer: Optimizer,
    /// Standard deviation of the keyed starting perturbation. δ = 0 is a
    /// singular point of the decoder (every instance norm sees a zero plane),
    /// so the iteration starts a few 8-bit levels away from it.
    pub init_std: f64,
    pub init_seed: u64,
}

impl Schedule {
    pub const DEFAULT_INIT_STD: f64 = 0.01;
    pub const GD_LR0: f64 = 0.056_234_132_519_034_91;
    pub const ADAM_LR0: f64 = 0.005;

    /// Default schedule with the step size matched to `optimizer`.
    pub fn with_optimizer(optimizer: Optimizer) -> Self {
        Self {
            lr0: optimizer.default_lr0(),
            optimizer,
            ..Self::default()
        }
    }

    pub fn learning_rate(&self, t: usize) -> f64 {
        let halvings = t.checked_div(self.halving_period).unwrap_or(0);
        self.lr0 * 0.5f64.powi(halvings.min(1074) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::OutOfRange {
                name: "iterations".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::OutOfRange {
                name: "lr0".into(),
                message: format!("{}", self.lr0),
            });
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::OutOfRange {
                name: "init_std".into(),
                message: format!("{}", self.init_std),
            });
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 1500,
            lr0: Self::ADAM_LR0,
            halving_period: 500,
            steganalysis_start: 1400,
            optimizer: Optimizer::default(),
            init_std: Self::DEFAULT_INIT_STD,
            init_seed: 0,
        }
    }
}

/// Mean squared difference.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    crate::metrics::mse(a, b)
}

/// Two-class cross-entropy of `logits` against class `y`.
pub fn ce_loss(logits: [f64; 2], y: usize) -> Result<f64> {
    if y > 1 {
        return Err(Error::InvalidParameter(format!("class index {y} not in {{0, 1}}")));
    }
    // -log softmax_y = softplus(other - own)
    let d = logits[1 - y] - logits[y];
    Ok(if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    })
}

/// Gradient of [`ce_loss`] with respect to the logits.
pub fn ce_loss_grad(logits: [f64; 2], y: usize) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    let mut g = [e0 / s, e1 / s];
    g[y] -= 1.0;
    g
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl Losses {
    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.l2.is_finite() && self.l3.is_finite() && self.l4.is_finite()
    }
}

/// Whether L1 is still above the floor, i.e. the weighted-L1 branch applies.
pub fn l1_active(l1: f64, cfg: &LossConfig) -> bool {
    l1 >= cfg.floor
}

/// Adaptive objective. When L1 is under the floor the L1 term is replaced by
/// the constant floor.
pub fn objective(losses: &Losses, cfg: &LossConfig) -> f64 {
    let l3 = if cfg.uses_attack_loss() { losses.l3 } else { 0.0 };
    let head = if l1_active(losses.l1, cfg) {
        cfg.alpha * losses.l1
    } else {
        cfg.floor
    };
    head + cfg.beta * losses.l2 + (1.0 - cfg.beta) * l3 + cfg.gamma * losses.l4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackSpec;

    #[test]
    fn defaults() {
        let c = LossConfig::clean();
        assert_eq!((c.alpha, c.beta, c.gamma, c.floor, c.bound), (1.0, 3.0, 1e-5, 0.001, 0.2));
        assert!(!c.uses_attack_loss());
        let r = LossConfig::robust(AttackSuite::new(vec![AttackSpec::jpeg(80.0).unwrap()]));
        assert_eq!(r.beta, 0.5);
        assert!(r.uses_attack_loss());
        let s = Schedule::with_optimizer(Optimizer::GradientDescent);
        assert_eq!(s.iterations, 1500);
        assert_eq!(s.lr0, 10f64.powf(-1.25));
        assert_eq!(Schedule::default().optimizer.name(), "adam");
        assert_eq!(Schedule::default().lr0, 0.005);
        assert_eq!(s.learning_rate(499), s.lr0);
        assert_eq!(s.learning_rate(500), s.lr0 / 2.0);
        assert_eq!(s.learning_rate(1499), s.lr0 / 4.0);
    }

    #[test]
    fn robust_without_suite_is_invalid() {
        let mut c = LossConfig::clean();
        c.robust = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss([0.0, 0.0], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let v = ce_loss([10.0, -10.0], 0).unwrap();
        assert!((v / 2.061_153_620_314_381_5e-9 - 1.0).abs() < 1e-12, "{v}");
        let a = ce_loss([1.3, -0.2], 1).unwrap();
        let b = ce_loss([101.3, 99.8], 1).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(ce_loss([0.0, 0.0], 2).is_err());
        // huge logits stay finite
        assert!(ce_loss([1000.0, -1000.0], 1).unwrap().is_finite());
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let l = [0.7, -1.1];
        let g = ce_loss_grad(l, 1);
        let h = 1e-6;
        for i in 0..2 {
            let mut p = l;
            p[i] += h;
            let mut m = l;
            m[i] -= h;
            let fd = (ce_loss(p, 1).unwrap() - ce_loss(m, 1).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_examples() {
        let mut clean = LossConfig::clean();
        clean.gamma = 0.0;
        let l = Losses {
            l1: 0.0005,
            l2: 0.01,
            l3: 0.0,
            l4: 0.0,
        };
        assert!((objective(&l, &clean) - 0.031).abs() < 1e-15);

        let mut robust = LossConfig::robust(AttackSuite::new(vec![AttackSpec::contrast(0.7).unwrap()]));
        robust.gamma = 0.0;
        let l = Losses {
            l1: 0.01,
            l2: 0.02,
            l3: 0.02,
            l4: 0.0,
        };
        assert!((objective(&l, &robust) - 0.03).abs() < 1e-15);

        assert_eq!(objective(&Losses::default(), &LossConfig::clean()), 0.001);
    }

    #[test]
    fn clean_mode_ignores_attack_loss() {
        let cfg = LossConfig::clean();
        let l = Losses {
            l1: 0.002,
            l2: 0.01,
            l3: 5.0,
            l4: 0.0,
        };
        assert_eq!(objective(&l, &cfg), 0.002 + 3.0 * 0.01);
    }
}
