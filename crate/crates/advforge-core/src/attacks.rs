//! White-box evasion attacks: single-step and iterative gradient-sign
//! methods, plus the random-start projected variant.
//!
//! All three walk the input along `sign(∂J/∂x)` with the model held fixed.
//! They differ only in step count and starting point. Every attack returns
//! a new tensor; neither the model nor the input is mutated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::LabelBatch;
use crate::nn::model::{grad_input, Model};
use crate::nn::init;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Ifgsm,
    Pgd,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Ifgsm => "ifgsm",
            AttackFamily::Pgd => "pgd",
        })
    }
}

/// A fully resolved attack: family, ℓ∞ budget ε (in normalized pixel
/// units), iteration count, random-start flag, RNG seed, and the valid
/// pixel interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
    pub data_range: [f64; 2],
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64, data_range: [f64; 2]) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
            data_range,
        }
    }

    pub fn ifgsm(epsilon: f64, steps: usize, data_range: [f64; 2]) -> Self {
        AttackSpec {
            family: AttackFamily::Ifgsm,
            epsilon,
            steps,
            random_start: false,
            seed: 0,
            data_range,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, seed: u64, data_range: [f64; 2]) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            epsilon,
            steps,
            random_start: true,
            seed,
            data_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return inv(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.steps < 1 {
            return inv("steps must be >= 1".into());
        }
        if self.family == AttackFamily::Fgsm && self.steps != 1 {
            return inv(format!("fgsm takes exactly 1 step, got {}", self.steps));
        }
        if self.family == AttackFamily::Pgd && !self.random_start {
            return inv("pgd requires random_start".into());
        }
        if self.family != AttackFamily::Pgd && self.random_start {
            return inv(format!("random_start only applies to pgd, not {}", self.family));
        }
        let [lo, hi] = self.data_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return inv(format!("data_range must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// Per-iteration step size: ε for single-step, ε/k for iterative.
    pub fn step_size(&self) -> f64 {
        match self.family {
            AttackFamily::Fgsm => self.epsilon,
            AttackFamily::Ifgsm | AttackFamily::Pgd => self.epsilon / self.steps as f64,
        }
    }

    /// Runs the attack against `model`, perturbing `x` to raise the CE
    /// between `targets` and the model output.
    pub fn run(&self, model: &Model, x: &Tensor, targets: &LabelBatch) -> Result<Tensor> {
        self.validate()?;
        match self.family {
            AttackFamily::Fgsm => fgsm(model, x, targets, self.epsilon, self.data_range),
            AttackFamily::Ifgsm => {
                ifgsm(model, x, targets, self.epsilon, self.steps, self.data_range)
            }
            AttackFamily::Pgd => pgd(
                model,
                x,
                targets,
                self.epsilon,
                self.steps,
                self.seed,
                self.data_range,
            ),
        }
    }
}

fn clip_to_range(x: &mut Tensor, lo: f64, hi: f64) {
    for v in x.data_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Single gradient-sign step: `clip(x + ε·sign(∂J/∂x))`.
///
/// Every component moves by exactly ε, exactly 0 (where the gradient is
/// zero), or to the data-range boundary.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    targets: &LabelBatch,
    epsilon: f64,
    data_range: [f64; 2],
) -> Result<Tensor> {
    let g = grad_input(model, x, targets)?;
    let mut out = x.clone();
    for (o, gv) in out.data_mut().iter_mut().zip(g.data()) {
        *o += epsilon * sign(*gv);
    }
    clip_to_range(&mut out, data_range[0], data_range[1]);
    Ok(out)
}

/// Iterative gradient-sign attack: k steps of size a = ε/k, each followed
/// by a clamp into the ε-ball around the original input intersected with
/// the data range.
pub fn ifgsm(
    model: &Model,
    x: &Tensor,
    targets: &LabelBatch,
    epsilon: f64,
    k: usize,
    data_range: [f64; 2],
) -> Result<Tensor> {
    let a = epsilon / k as f64;
    let mut cur = x.clone();
    for _ in 0..k {
        let g = grad_input(model, &cur, targets)?;
        for (c, gv) in cur.data_mut().iter_mut().zip(g.data()) {
            *c += a * sign(*gv);
        }
        cur = clamp_ball(x, &cur, epsilon, data_range)?;
    }
    Ok(cur)
}

/// Projected iterative attack: start from a seeded uniform point inside
/// the ε-box (clipped to the data range), then run the iterative
/// gradient-sign steps with the ball still centered on the *original* x.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    targets: &LabelBatch,
    epsilon: f64,
    k: usize,
    seed: u64,
    data_range: [f64; 2],
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = epsilon / k as f64;
    let mut cur = x.clone();
    for v in cur.data_mut() {
        *v += init::uniform(&mut rng, -epsilon, epsilon);
    }
    clip_to_range(&mut cur, data_range[0], data_range[1]);
    for _ in 0..k {
        let g = grad_input(model, &cur, targets)?;
        for (c, gv) in cur.data_mut().iter_mut().zip(g.data()) {
            *c += a * sign(*gv);
        }
        cur = clamp_ball(x, &cur, epsilon, data_range)?;
    }
    Ok(cur)
}

/// Elementwise clip of `x` into `[max(lo, x_orig−ε), min(hi, x_orig+ε)]`.
pub fn clamp_ball(
    x_orig: &Tensor,
    x: &Tensor,
    epsilon: f64,
    data_range: [f64; 2],
) -> Result<Tensor> {
    if x_orig.shape() != x.shape() {
        return Err(Error::shape(
            format!("{:?}", x_orig.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    let [lo, hi] = data_range;
    let mut out = x.clone();
    for (o, orig) in out.data_mut().iter_mut().zip(x_orig.data()) {
        let floor = (orig - epsilon).max(lo);
        let ceil = (orig + epsilon).min(hi);
        *o = o.clamp(floor, ceil);
    }
    Ok(out)
}
