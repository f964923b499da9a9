use crate::attack::{apply_surrogate, AttackSpec};
use crate::decoder::FixedDecoder;
use crate::error::{Error, Result};
use crate::image::{quantize8_value, ImageTensor, Tensor};
use crate::keyed::derive_stream;
use crate::texture::BlockMask;

use super::{
    ce_loss, ce_loss_grad, l1_active, objective, LossConfig, Losses, Schedule, Steganalyzer,
    LABEL_NORMAL,
};

use crate::attack::{CLAMP_PASS_HIGH, CLAMP_PASS_LOW};

/// Update rule applied to the objective gradient before projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `δ ← δ − lr·∇L`
    GradientDescent,
    /// Bias-corrected first/second moment scaling of the gradient.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::GradientDescent => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sgd" | "gd" => Some(Optimizer::GradientDescent),
            "adam" => Some(Self::adam()),
            _ => None,
        }
    }

    /// Initial step size used when none is configured. Plain descent takes
    /// 10^-1.25; Adam steps are already normalized and need a much smaller
    /// one.
    pub fn default_lr0(&self) -> f64 {
        match self {
            Optimizer::GradientDescent => Schedule::GD_LR0,
            Optimizer::Adam { .. } => Schedule::ADAM_LR0,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub losses: Losses,
    pub total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,L1,L2,L3,L4,L,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iteration,
            self.losses.l1,
            self.losses.l2,
            self.losses.l3,
            self.losses.l4,
            self.total,
            self.lr
        )
    }
}

/// State visible to an observer after each projected update.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub delta: &'a Tensor,
    pub record: &'a LossRecord,
    pub best_recovery: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    /// Iterate with the lowest L2 + L3.
    pub delta: Tensor,
    pub best_iteration: usize,
    pub best_recovery: f64,
    pub best_objective: f64,
    pub final_delta: Tensor,
    pub trace: Vec<LossRecord>,
}

/// Everything the objective depends on besides δ and the iteration.
pub(crate) struct Problem<'a> {
    pub cover: &'a Tensor,
    pub secret: &'a Tensor,
    pub pixel_mask: Vec<bool>,
    pub mask_support: usize,
    pub decoder: &'a FixedDecoder,
    pub cfg: &'a LossConfig,
    pub plugin: Option<&'a dyn Steganalyzer>,
    /// Round the composed stego to 8 bits (straight-through) in the forward
    /// pass. Only gradient checks turn this off.
    pub quantize: bool,
}

fn mask_tensor(t: &mut Tensor, pixel_mask: &[bool]) {
    for c in 0..t.channels() {
        for (v, &keep) in t.plane_mut(c).iter_mut().zip(pixel_mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Per-iteration noise seeds so stochastic attacks do not repeat one draw.
fn iteration_spec(spec: &AttackSpec, t: usize) -> AttackSpec {
    if spec.is_stochastic() {
        let mixed = spec
            .noise_seed
            .wrapping_add((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        spec.with_seed(mixed)
    } else {
        *spec
    }
}

impl<'a> Problem<'a> {
    pub fn new(
        cover: &'a ImageTensor,
        secret: &'a ImageTensor,
        mask: &BlockMask,
        decoder: &'a FixedDecoder,
        cfg: &'a LossConfig,
        plugin: Option<&'a dyn Steganalyzer>,
    ) -> Result<Self> {
        let profile = decoder.profile();
        let side = profile.cover_side;
        if cover.shape() != (3, side, side) {
            return Err(Error::ShapeMismatch {
                left: cover.shape(),
                right: (3, side, side),
            });
        }
        let s = profile.secret_side;
        if secret.shape() != (3, s, s) {
            return Err(Error::ShapeMismatch {
                left: secret.shape(),
                right: (3, s, s),
            });
        }
        if (mask.grid.height(), mask.grid.width()) != (side, side) {
            return Err(Error::Dimensions(format!(
                "mask covers {}x{}, cover is {side}x{side}",
                mask.grid.height(),
                mask.grid.width()
            )));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask {
                threshold: f64::NAN,
            });
        }
        cfg.validate()?;
        let pixel_mask = mask.pixel_mask();
        let mask_support = 3 * pixel_mask.iter().filter(|&&m| m).count();
        Ok(Self {
            cover: cover.tensor(),
            secret: secret.tensor(),
            pixel_mask,
            mask_support,
            decoder,
            cfg,
            plugin,
            quantize: true,
        })
    }

    /// Losses, objective and ∂L/∂δ at iteration `t`.
    pub fn evaluate(
        &self,
        delta: &Tensor,
        t: usize,
        steganalysis_active: bool,
    ) -> Result<(Losses, f64, Tensor)> {
        let cfg = self.cfg;
        let pre = self.cover.add(delta)?;
        let composed = pre.map(|v| {
            let c = v.clamp(0.0, 1.0);
            if self.quantize {
                quantize8_value(c)
            } else {
                c
            }
        });

        let mut d_clean = composed.sub(self.cover)?;
        mask_tensor(&mut d_clean, &self.pixel_mask);
        let (s_clean, tape_clean) = self.decoder.forward(&d_clean)?;
        let n_secret = self.secret.len() as f64;

        let l1 = delta.data().iter().map(|v| v * v).sum::<f64>() / self.mask_support as f64;
        let l2 = crate::metrics::mse(s_clean.tensor(), self.secret)?;

        let mut grad_composed = {
            let up = s_clean
                .tensor()
                .zip_map(self.secret, |o, s| cfg.beta * 2.0 * (o - s) / n_secret)?;
            let mut g = self.decoder.input_gradient(tape_clean, &up)?;
            mask_tensor(&mut g, &self.pixel_mask);
            g
        };

        let mut l3 = 0.0;
        if cfg.uses_attack_loss() {
            let spec = iteration_spec(cfg.suite.at_iteration(t).expect("non-empty suite"), t);
            let (attacked, attack_tape) = apply_surrogate(&spec, &composed)?;
            let mut d_att = attacked.sub(self.cover)?;
            mask_tensor(&mut d_att, &self.pixel_mask);
            let (s_att, tape_att) = self.decoder.forward(&d_att)?;
            l3 = crate::metrics::mse(s_att.tensor(), self.secret)?;
            let w = 1.0 - cfg.beta;
            let up = s_att
                .tensor()
                .zip_map(self.secret, |o, s| w * 2.0 * (o - s) / n_secret)?;
            let mut g = self.decoder.input_gradient(tape_att, &up)?;
            mask_tensor(&mut g, &self.pixel_mask);
            grad_composed.add_assign(&attack_tape.backward(&g))?;
        }

        let mut l4 = 0.0;
        if let Some(plugin) = self.plugin.filter(|_| steganalysis_active) {
            let logits = plugin.logits(&composed);
            l4 = ce_loss(logits, LABEL_NORMAL)?;
            if cfg.gamma != 0.0 {
                let dl = ce_loss_grad(logits, LABEL_NORMAL);
                let g = plugin.input_gradient(&composed, [cfg.gamma * dl[0], cfg.gamma * dl[1]]);
                grad_composed.add_assign(&g)?;
            }
        }

        let losses = Losses { l1, l2, l3, l4 };
        let total = objective(&losses, cfg);

        // Rounding passes the gradient straight through; the clamp passes it
        // inside its window.
        let mut grad = grad_composed.zip_map(&pre, |g, v| {
            if (CLAMP_PASS_LOW..=CLAMP_PASS_HIGH).contains(&v) {
                g
            } else {
                0.0
            }
        })?;
        if l1_active(l1, cfg) {
            let k = cfg.alpha * 2.0 / self.mask_support as f64;
            for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
                *g += k * d;
            }
        }
        mask_tensor(&mut grad, &self.pixel_mask);
        Ok((losses, total, grad))
    }

    pub fn project(&self, delta: &mut Tensor) {
        let mu = self.cfg.bound;
        for v in delta.data_mut() {
            *v = v.clamp(-mu, mu);
        }
        mask_tensor(delta, &self.pixel_mask);
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

pub fn optimize_perturbation(
    cover: &ImageTensor,
    secret: &ImageTensor,
    mask: &BlockMask,
    decoder: &FixedDecoder,
    cfg: &LossConfig,
    schedule: &Schedule,
    plugin: Option<&dyn Steganalyzer>,
) -> Result<OptimizationResult> {
    optimize_perturbation_with(cover, secret, mask, decoder, cfg, schedule, plugin, |_| {})
}

/// As [`optimize_perturbation`], calling `observer` after every projected
/// update.
#[allow(clippy::too_many_arguments)]
pub fn optimize_perturbation_with(
    cover: &ImageTensor,
    secret: &ImageTensor,
    mask: &BlockMask,
    decoder: &FixedDecoder,
    cfg: &LossConfig,
    schedule: &Schedule,
    plugin: Option<&dyn Steganalyzer>,
    mut observer: impl FnMut(&IterationView),
) -> Result<OptimizationResult> {
    schedule.validate()?;
    let problem = Problem::new(cover, secret, mask, decoder, cfg, plugin)?;

    let (c, h, w) = cover.shape();
    let mut init = derive_stream(schedule.init_seed, "rspg/init");
    let mut delta = Tensor::from_fn(c, h, w, |_, _, _| schedule.init_std * init.gaussian());
    problem.project(&mut delta);
    let mut best = delta.clone();
    let mut best_recovery = f64::INFINITY;
    let mut best_objective = f64::INFINITY;
    let mut best_iteration = 0;
    let mut trace = Vec::with_capacity(schedule.iterations);
    let mut adam = AdamState {
        m: vec![0.0; delta.len()],
        v: vec![0.0; delta.len()],
        steps: 0,
    };

    for t in 0..schedule.iterations {
        let lr = schedule.learning_rate(t);
        let stega = t >= schedule.steganalysis_start;
        let (losses, total, grad) = problem.evaluate(&delta, t, stega)?;
        if !losses.is_finite() || !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                l1: losses.l1,
                l2: losses.l2,
                l3: losses.l3,
                l4: losses.l4,
            });
        }
        let recovery = losses.l2 + losses.l3;
        if recovery < best_recovery {
            best_recovery = recovery;
            best_iteration = t;
            best.clone_from(&delta);
        }
        best_objective = best_objective.min(total);

        match schedule.optimizer {
            Optimizer::GradientDescent => {
                for (d, g) in delta.data_mut().iter_mut().zip(grad.data()) {
                    *d -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                adam.steps += 1;
                let bc1 = 1.0 - beta1.powi(adam.steps);
                let bc2 = 1.0 - beta2.powi(adam.steps);
                for (i, (d, &g)) in delta.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let m = beta1 * adam.m[i] + (1.0 - beta1) * g;
                    let v = beta2 * adam.v[i] + (1.0 - beta2) * g * g;
                    adam.m[i] = m;
                    adam.v[i] = v;
                    *d -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                }
            }
        }
        problem.project(&mut delta);

        let record = LossRecord {
            iteration: t,
            losses,
            total,
            lr,
        };
        trace.push(record);
        observer(&IterationView {
            iteration: t,
            delta: &delta,
            record: &record,
            best_recovery,
        });
    }

    Ok(OptimizationResult {
        delta: best,
        best_iteration,
        best_recovery,
        best_objective,
        final_delta: delta,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackSuite, AttackKind};
    use crate::decoder::CapacityProfile;
    use crate::rspg::BuiltInDetector;
    use crate::texture::BlockGrid;

    fn toy() -> (ImageTensor, ImageTensor, BlockMask, FixedDecoder) {
        let mut s = derive_stream(21, "toy");
        let cover =
            ImageTensor::new(Tensor::from_fn(3, 16, 16, |_, _, _| 0.2 + 0.6 * s.uniform())).unwrap();
        let secret =
            ImageTensor::new(Tensor::from_fn(3, 8, 8, |_, _, _| s.uniform())).unwrap();
        let grid = BlockGrid::for_dims(16, 16, 8).unwrap();
        let mask = BlockMask {
            grid,
            selected: vec![true, false, true, true],
        };
        let dec = FixedDecoder::new(5, &CapacityProfile::new("toy", 16, 8, 4).unwrap()).unwrap();
        (cover, secret, mask, dec)
    }

    fn check_gradient(cfg: &LossConfig, plugin: Option<&dyn Steganalyzer>) {
        let (cover, secret, mask, dec) = toy();
        let mut problem = Problem::new(&cover, &secret, &mask, &dec, cfg, plugin).unwrap();
        problem.quantize = false;
        let mut s = derive_stream(3, "delta");
        let mut delta = Tensor::from_fn(3, 16, 16, |_, _, _| 0.05 * (s.uniform() - 0.5));
        problem.project(&mut delta);
        let (_, _, grad) = problem.evaluate(&delta, 0, true).unwrap();
        // Small step: instance norm amplifies tiny inputs, so larger steps
        // cross LeakyReLU kinks.
        let h = 1e-6;
        let pix = mask.pixel_mask();
        let mut errs = Vec::new();
        for i in 0..delta.len() {
            if !pix[i % 256] {
                assert_eq!(grad.data()[i], 0.0);
                continue;
            }
            let mut p = delta.clone();
            p.data_mut()[i] += h;
            let mut m = delta.clone();
            m.data_mut()[i] -= h;
            let fp = problem.evaluate(&p, 0, true).unwrap().1;
            let fm = problem.evaluate(&m, 0, true).unwrap().1;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data()[i];
            let scale = grad.max_abs();
            errs.push((fd - an).abs() / scale);
        }
        errs.sort_by(|a, b| a.total_cmp(b));
        let worst = errs[errs.len() - 1];
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn clean_objective_gradient_matches_finite_differences() {
        let mut cfg = LossConfig::clean();
        cfg.floor = 0.0; // keep the L1 branch active
        check_gradient(&cfg, None);
    }

    #[test]
    fn robust_objective_gradient_matches_finite_differences() {
        let suite = AttackSuite::new(vec![AttackSpec::contrast(0.7).unwrap()]);
        let mut cfg = LossConfig::robust(suite);
        cfg.gamma = 0.1;
        let det = BuiltInDetector::default();
        check_gradient(&cfg, Some(&det));
        let blur = AttackSuite::new(vec![AttackSpec::new(AttackKind::GaussianBlur, 0.8).unwrap()]);
        check_gradient(&LossConfig::robust(blur), None);
    }

    #[test]
    fn projection_and_mask_hold_every_iteration() {
        let (cover, secret, mask, dec) = toy();
        let sched = Schedule {
            iterations: 40,
            steganalysis_start: 30,
            ..Schedule::default()
        };
        let suite = AttackSuite::new(vec![
            AttackSpec::jpeg(80.0).unwrap(),
            AttackSpec::gaussian_noise(0.01, 1).unwrap(),
        ]);
        let cfg = LossConfig::robust(suite);
        let det = BuiltInDetector::default();
        let pix = mask.pixel_mask();
        let mut seen = 0;
        let mut last_best = f64::INFINITY;
        let res = optimize_perturbation_with(
            &cover,
            &secret,
            &mask,
            &dec,
            &cfg,
            &sched,
            Some(&det),
            |view| {
                seen += 1;
                assert!(view.delta.max_abs() <= 0.2);
                for (i, v) in view.delta.data().iter().enumerate() {
                    if !pix[i % 256] {
                        assert_eq!(*v, 0.0);
                    }
                }
                assert!(view.best_recovery <= last_best);
                last_best = view.best_recovery;
                if view.iteration >= 30 {
                    assert!(view.record.losses.l4 > 0.0);
                } else {
                    assert_eq!(view.record.losses.l4, 0.0);
                }
            },
        )
        .unwrap();
        assert_eq!(seen, 40);
        assert_eq!(res.trace.len(), 40);
        assert!(res.delta.max_abs() <= 0.2);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let (cover, secret, mask, dec) = toy();
        let empty = BlockMask {
            grid: mask.grid,
            selected: vec![false; 4],
        };
        let err = optimize_perturbation(
            &cover,
            &secret,
            &empty,
            &dec,
            &LossConfig::clean(),
            &Schedule::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyMask { .. }));
    }

    #[test]
    fn runs_are_deterministic() {
        let (cover, secret, mask, dec) = toy();
        let sched = Schedule {
            iterations: 15,
            ..Schedule::default()
        };
        let cfg = LossConfig::robust(AttackSuite::new(vec![AttackSpec::gaussian_noise(0.01, 9).unwrap()]));
        let a = optimize_perturbation(&cover, &secret, &mask, &dec, &cfg, &sched, None).unwrap();
        let b = optimize_perturbation(&cover, &secret, &mask, &dec, &cfg, &sched, None).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.final_delta, b.final_delta);
        assert_eq!(a.trace, b.trace);
    }
}
