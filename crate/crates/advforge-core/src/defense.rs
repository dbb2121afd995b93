//! Training regimes: natural, single-step adversarial training, iterative
//! adversarial training, and the two-step defense that pairs each
//! adversarial example with a second point probing the local loss surface.
//!
//! All regimes share one update skeleton per mini-batch: generate whatever
//! auxiliary inputs the mode needs (using the training targets, smoothed
//! when configured), accumulate the weighted loss gradient, step the
//! optimizer. Gradients never flow through example generation — generated
//! inputs are constants with respect to the parameters.
//!
//! Determinism contract: given the same config (seed included) the whole
//! parameter trajectory is byte-identical across runs. Two structural
//! reductions are also byte-exact and implemented as real dispatches, not
//! approximations: `alpha == 1` makes the single-step adversarial mode use
//! exactly the natural-mode update, and `lambda == 0` makes the two-step
//! mode use exactly the single-step update (with ε = ε₁).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks;
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::nn::config::ModelConfig;
use crate::nn::layers::softmax_backward;
use crate::nn::loss::{ce_dp, ce_dq, cross_entropy, fused_ce_logits_grad, LabelBatch};
use crate::nn::model::{chunk_ranges, Gradients, Model, WAVE};
use crate::nn::optim::OptimizerSpec;
use crate::tensor::{sign, Tensor};

/// Mini-batches between telemetry records.
pub const LOG_INTERVAL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Natural,
    AdvFgsm,
    AdvIfgsm,
    E2sad,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Natural => "natural",
            Mode::AdvFgsm => "adv_fgsm",
            Mode::AdvIfgsm => "adv_ifgsm",
            Mode::E2sad => "e2sad",
        })
    }
}

fn default_alpha() -> f64 {
    1.0
}

fn default_range() -> [f64; 2] {
    [0.0, 1.0]
}

/// Full recipe for one training run. Serialized as JSON with exactly
/// these keys; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Clean-loss weight α ∈ [0,1]; the adversarial batch gets 1−α.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Dissimilarity weight λ ≥ 0 (two-step mode only).
    #[serde(default)]
    pub lambda: f64,
    /// Two-step mode: first-step size ε₁.
    #[serde(default)]
    pub eps1: f64,
    /// Two-step mode: second-step size ε₂.
    #[serde(default)]
    pub eps2: f64,
    /// Adversarial-training modes: generation budget ε.
    #[serde(default)]
    pub adv_eps: f64,
    /// Iterative adversarial training: generation step count k.
    #[serde(default)]
    pub adv_steps: usize,
    /// Label smoothing mass δ ∈ [0,1); 0 keeps hard labels.
    #[serde(default)]
    pub smoothing_delta: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    #[serde(default = "default_range")]
    pub data_range: [f64; 2],
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return bad(format!("alpha must be in [0,1], got {}", self.alpha));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.smoothing_delta.is_finite() && (0.0..1.0).contains(&self.smoothing_delta)) {
            return bad(format!(
                "smoothing_delta must be in [0,1), got {}",
                self.smoothing_delta
            ));
        }
        if self.batch_size < 1 {
            return bad(format!("batch_size must be >= 1, got {}", self.batch_size));
        }
        let [lo, hi] = self.data_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("data_range must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        self.optimizer.validate()?;
        match self.mode {
            Mode::Natural => {}
            Mode::AdvFgsm => {
                if !(self.adv_eps.is_finite() && self.adv_eps > 0.0) {
                    return bad(format!(
                        "adv_eps must be > 0 for adv_fgsm, got {}",
                        self.adv_eps
                    ));
                }
            }
            Mode::AdvIfgsm => {
                if !(self.adv_eps.is_finite() && self.adv_eps > 0.0) {
                    return bad(format!(
                        "adv_eps must be > 0 for adv_ifgsm, got {}",
                        self.adv_eps
                    ));
                }
                if self.adv_steps < 1 {
                    return bad(format!(
                        "adv_steps must be >= 1 for adv_ifgsm, got {}",
                        self.adv_steps
                    ));
                }
            }
            Mode::E2sad => {
                if !(self.eps1.is_finite() && self.eps1 > 0.0) {
                    return bad(format!("eps1 must be > 0 for e2sad, got {}", self.eps1));
                }
                if !(self.eps2.is_finite() && self.eps2 >= 0.0) {
                    return bad(format!("eps2 must be >= 0 for e2sad, got {}", self.eps2));
                }
            }
        }
        Ok(())
    }
}

/// One telemetry record. `loss_total` always recombines as
/// `α·loss_clean + (1−α)·loss_adv + λ·loss_dissim` under the run's
/// effective weights (natural mode: α=1, λ=0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_clean: f64,
    pub loss_adv: f64,
    pub loss_dissim: f64,
}

pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub model: Model,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io_err = |e| Error::io(path, e);
        w.write_all(b"iteration,loss_total,loss_clean,loss_adv,loss_dissim\n")
            .map_err(io_err)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.iteration, r.loss_total, r.loss_clean, r.loss_adv, r.loss_dissim
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Moves δ of each row's probability mass from the true class to the
/// others, uniformly: the true class keeps 1−δ, every other class gets
/// δ/(C−1). δ=0 returns the batch unchanged.
pub fn smooth_labels(hard: &LabelBatch, delta: f64, num_classes: usize) -> Result<LabelBatch> {
    if !(delta.is_finite() && (0.0..1.0).contains(&delta)) {
        return Err(Error::InvalidConfig(format!(
            "smoothing delta must be in [0,1), got {delta}"
        )));
    }
    if hard.num_classes() != num_classes {
        return Err(Error::shape(
            format!("{num_classes} classes"),
            format!("{} classes", hard.num_classes()),
        ));
    }
    if delta == 0.0 {
        return Ok(hard.clone());
    }
    let off = delta / (num_classes - 1) as f64;
    let on = 1.0 - delta;
    let b = hard.batch();
    let mut t = Tensor::full(&[b, num_classes], off);
    for (i, &c) in hard.hard_indices.iter().enumerate() {
        t.data_mut()[i * num_classes + c] = on;
    }
    Ok(LabelBatch {
        targets: t,
        hard_indices: hard.hard_indices.clone(),
    })
}

/// Weighted two-batch loss: `α·J(θ,x,y) + (1−α)·J(θ,x_adv,y)`.
pub fn adv_training_loss(
    model: &Model,
    x_clean: &Tensor,
    x_adv: &Tensor,
    targets: &LabelBatch,
    alpha: f64,
) -> Result<f64> {
    let j_clean = cross_entropy(&targets.targets, &model.forward(x_clean)?.probs)?;
    let j_adv = cross_entropy(&targets.targets, &model.forward(x_adv)?.probs)?;
    Ok(alpha * j_clean + (1.0 - alpha) * j_adv)
}

/// First generation step of the two-step defense: a single gradient-sign
/// step of size ε₁ on the CE between the (possibly smoothed) training
/// targets and the model output.
pub fn e2sad_step1(
    model: &Model,
    x: &Tensor,
    targets_smoothed: &LabelBatch,
    eps1: f64,
    data_range: [f64; 2],
) -> Result<Tensor> {
    attacks::fgsm(model, x, targets_smoothed, eps1, data_range)
}

/// Second generation step: starting from the first adversarial point,
/// take one ε₂ gradient-sign step on the CE between the model's own
/// (detached) output at that point and the live output, evaluated at the
/// point itself. Only the data range is enforced — no ε-ball around the
/// clean input.
pub fn e2sad_step2(
    model: &Model,
    x_adv1: &Tensor,
    eps2: f64,
    data_range: [f64; 2],
) -> Result<Tensor> {
    let (_, dx, _) = model.backward_batch(x_adv1, &dissim_generation_seed, true)?;
    let dx = dx.expect("input gradient requested");
    let mut out = x_adv1.clone();
    for (o, g) in out.data_mut().iter_mut().zip(dx.data()) {
        *o = (*o + eps2 * sign(*g)).clamp(data_range[0], data_range[1]);
    }
    Ok(out)
}

/// Logits-level seed for step-2 generation: gradient of
/// `CE(stopgrad(p), q)` in `q`, evaluated where `q == p`.
fn dissim_generation_seed(probs_chunk: &Tensor, _row0: usize) -> Tensor {
    let dq = ce_dq(probs_chunk, probs_chunk, 1.0);
    softmax_backward(probs_chunk, &dq)
}

/// Full two-step training loss:
/// `α·J(θ,X,Y) + (1−α)·J(θ,X_adv1,Y) + (λ/m)·Σᵢ CE(f(x_adv1ᵢ), f(x_adv2ᵢ))`.
///
/// Gradients flow through θ in all three terms (both arguments of the CE
/// dissimilarity included); the adversarial inputs themselves are
/// constants. Note CE(p,p) is the entropy of p, not zero, so the
/// dissimilarity term has a positive floor when the two points coincide.
pub fn e2sad_total_loss(
    model: &Model,
    x_clean: &Tensor,
    x_adv1: &Tensor,
    x_adv2: &Tensor,
    targets: &LabelBatch,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    let p0 = model.forward(x_clean)?;
    let p1 = model.forward(x_adv1)?;
    let p2 = model.forward(x_adv2)?;
    let j_clean = cross_entropy(&targets.targets, &p0.probs)?;
    let j_adv = cross_entropy(&targets.targets, &p1.probs)?;
    let dissim = cross_entropy(&p1.probs, &p2.probs)?;
    Ok(alpha * j_clean + (1.0 - alpha) * j_adv + lambda * dissim)
}

/// Gradient-magnitude-regularized objective:
/// `J(θ,x_adv,y) + (ε·N/2)·‖∂J/∂x_adv‖₂` with the norm over the whole
/// flattened batch gradient. Evaluation-only diagnostic.
pub fn minmax_reg_objective(
    model: &Model,
    x_adv: &Tensor,
    targets: &LabelBatch,
    epsilon: f64,
    batch_n: usize,
) -> Result<f64> {
    let j = cross_entropy(&targets.targets, &model.forward(x_adv)?.probs)?;
    let g = crate::nn::model::grad_input(model, x_adv, targets)?;
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(j + (epsilon * batch_n as f64 / 2.0) * norm)
}

/// Per-iteration loss components as observed by the mode pipelines.
struct LossParts {
    clean: f64,
    adv: f64,
    dissim: f64,
}

/// Trains a fresh Table-style CNN on `dataset` per `config`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    train_model(dataset, config, ModelConfig::mnist_cnn())
}

/// As [`train`] but with an explicit architecture (small models keep the
/// identity and oracle tests fast).
pub fn train_model(
    dataset: &Dataset,
    config: &TrainConfig,
    arch: ModelConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if dataset.data_range != config.data_range {
        return Err(Error::InvalidConfig(format!(
            "config data_range {:?} does not match dataset data_range {:?}",
            config.data_range, dataset.data_range
        )));
    }
    let mut model = Model::new(arch, config.seed)?;
    let num_classes = model.num_classes();
    let mut opt = config.optimizer.build(&model);
    // Distinct RNG lineage for batch order so it can't collide with the
    // weight-init stream.
    let batch_seed = config.seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut batches = BatchIterator::new(dataset, config.batch_size, batch_seed)?;
    let mut records = Vec::new();

    for it in 1..=config.iterations {
        let (x, labels) = batches.next_batch();
        let hard = LabelBatch::one_hot(
            &labels.iter().map(|&l| l as usize).collect::<Vec<_>>(),
            num_classes,
        )?;
        let targets = smooth_labels(&hard, config.smoothing_delta, num_classes)?;
        let logging = it % LOG_INTERVAL == 0 || it == config.iterations;

        let (grads, parts) = match config.mode {
            Mode::Natural => natural_update(&model, &x, &targets)?,
            Mode::AdvFgsm => adv_update(
                &model,
                &x,
                &targets,
                config.alpha,
                config.adv_eps,
                1,
                config.data_range,
                logging,
            )?,
            Mode::AdvIfgsm => adv_update(
                &model,
                &x,
                &targets,
                config.alpha,
                config.adv_eps,
                config.adv_steps,
                config.data_range,
                logging,
            )?,
            Mode::E2sad => {
                if config.lambda == 0.0 {
                    // The dissimilarity term and second step contribute
                    // nothing at λ=0; this dispatch is what makes the
                    // reduction to single-step adversarial training
                    // byte-exact rather than merely close.
                    adv_update(
                        &model,
                        &x,
                        &targets,
                        config.alpha,
                        config.eps1,
                        1,
                        config.data_range,
                        logging,
                    )?
                } else {
                    e2sad_update(
                        &model,
                        &x,
                        &targets,
                        config.alpha,
                        config.lambda,
                        config.eps1,
                        config.eps2,
                        config.data_range,
                    )?
                }
            }
        };
        if grads.has_non_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient at iteration {it} (mode {})",
                config.mode
            )));
        }
        opt.step(&mut model, &grads);

        if logging {
            let (alpha_eff, lambda_eff) = match config.mode {
                Mode::Natural => (1.0, 0.0),
                Mode::AdvFgsm | Mode::AdvIfgsm => (config.alpha, 0.0),
                Mode::E2sad => (config.alpha, config.lambda),
            };
            records.push(LossRecord {
                iteration: it,
                loss_total: alpha_eff * parts.clean
                    + (1.0 - alpha_eff) * parts.adv
                    + lambda_eff * parts.dissim,
                loss_clean: parts.clean,
                loss_adv: parts.adv,
                loss_dissim: parts.dissim,
            });
        }
    }
    Ok(TrainReport { records, model })
}

/// Plain CE minimization: one fused forward+backward per batch.
fn natural_update(model: &Model, x: &Tensor, targets: &LabelBatch) -> Result<(Gradients, LossParts)> {
    let inv_m = 1.0 / x.dim0() as f64;
    let (grads, _, probs) = model.backward_batch(
        x,
        &|p, r0| {
            let t = targets.targets.slice_rows(r0, r0 + p.dim0());
            fused_ce_logits_grad(&t, p, inv_m)
        },
        false,
    )?;
    let clean = cross_entropy(&targets.targets, &probs.probs)?;
    Ok((grads, LossParts { clean, adv: 0.0, dissim: 0.0 }))
}

/// Adversarial training update, single-step (k=1) or iterative (k>1):
/// generate x_adv with k gradient-sign steps, then descend
/// `α·J(clean) + (1−α)·J(adv)`.
///
/// The first generation backward doubles as the clean-loss backward (the
/// seeds differ only by the positive scale, which cannot change the sign),
/// so the clean gradient costs nothing extra. At α=1 the adversarial loss
/// pass is skipped entirely, which keeps the parameter update bit-equal to
/// natural training rather than polluted by signed zeros.
#[allow(clippy::too_many_arguments)]
fn adv_update(
    model: &Model,
    x: &Tensor,
    targets: &LabelBatch,
    alpha: f64,
    eps: f64,
    k: usize,
    data_range: [f64; 2],
    logging: bool,
) -> Result<(Gradients, LossParts)> {
    let m = x.dim0();
    let inv_m = 1.0 / m as f64;
    let seed_fn = |scale: f64| {
        move |p: &Tensor, r0: usize| {
            let t = targets.targets.slice_rows(r0, r0 + p.dim0());
            fused_ce_logits_grad(&t, p, scale)
        }
    };

    // Generation step 1, fused with the clean-loss backward.
    let (mut grads, dx, p0) = model.backward_batch(x, &seed_fn(inv_m), true)?;
    let clean = cross_entropy(&targets.targets, &p0.probs)?;
    let a = eps / k as f64;
    let mut x_adv = x.clone();
    for (o, g) in x_adv.data_mut().iter_mut().zip(dx.unwrap().data()) {
        *o += a * sign(*g);
    }
    x_adv = attacks::clamp_ball(x, &x_adv, eps, data_range)?;
    // Generation steps 2..k.
    for _ in 1..k {
        let (_, dx, _) = model.backward_batch(&x_adv, &seed_fn(inv_m), true)?;
        for (o, g) in x_adv.data_mut().iter_mut().zip(dx.unwrap().data()) {
            *o += a * sign(*g);
        }
        x_adv = attacks::clamp_ball(x, &x_adv, eps, data_range)?;
    }

    grads.scale(alpha);
    let adv = if alpha < 1.0 {
        let (g_adv, _, p1) = model.backward_batch(&x_adv, &seed_fn((1.0 - alpha) * inv_m), false)?;
        grads.axpy(1.0, &g_adv);
        cross_entropy(&targets.targets, &p1.probs)?
    } else if logging {
        // Telemetry only; no parameter effect.
        cross_entropy(&targets.targets, &model.forward(&x_adv)?.probs)?
    } else {
        0.0
    };
    Ok((grads, LossParts { clean, adv, dissim: 0.0 }))
}

/// Two-step defense update (λ > 0): three forwards and four backwards.
///
/// Pass 1 is the fused clean-loss backward at x, which also yields the
/// step-1 direction. Everything downstream of x_adv1 — the step-2
/// generation backward, the dissimilarity's second-argument backward at
/// x_adv2, and the combined adversarial-CE + first-argument backward at
/// x_adv1 — runs chunk by chunk: one chunk's x_adv1 trace is walked twice
/// and dropped before the next chunk starts, so no full-batch trace is
/// ever materialized and the working set stays cache-sized. Every seed is
/// row-local and the gradient folds follow the engine's fixed chunk
/// order, so each pass matches its full-batch counterpart bit for bit.
/// Final accumulation is `α·g_clean + (g_adv ⊕ g_dissim)`, the two loop
/// passes folded jointly in chunk order.
#[allow(clippy::too_many_arguments)]
fn e2sad_update(
    model: &Model,
    x: &Tensor,
    targets: &LabelBatch,
    alpha: f64,
    lambda: f64,
    eps1: f64,
    eps2: f64,
    data_range: [f64; 2],
) -> Result<(Gradients, LossParts)> {
    let m = x.dim0();
    let inv_m = 1.0 / m as f64;
    let [lo, hi] = data_range;

    // Pass 1: clean loss backward + first generation step.
    let (mut grads, dx0, p0) = model.backward_batch(
        x,
        &|p, r0| {
            let t = targets.targets.slice_rows(r0, r0 + p.dim0());
            fused_ce_logits_grad(&t, p, inv_m)
        },
        true,
    )?;
    let clean = cross_entropy(&targets.targets, &p0.probs)?;
    drop(p0);
    let mut x1 = x.clone();
    for (o, g) in x1.data_mut().iter_mut().zip(dx0.unwrap().data()) {
        *o = (*o + eps1 * sign(*g)).clamp(lo, hi);
    }

    // Passes 2-4, streamed per chunk. For each chunk of x_adv1: trace its
    // forward once, back out the step-2 direction (parameter gradients of
    // that backward are discarded; the cost is uniform), walk the kept
    // chunk trace again with the adversarial CE seed and the
    // dissimilarity's first-argument seed combined, then — with the first
    // trace dropped — run the backward at x_adv2 with the dissimilarity's
    // second-argument seed.
    model.note_input_grad_eval(); // the step-2 direction, counted per batch
    let lam_m = lambda * inv_m;
    let nc = model.num_classes();
    let mut g_x = Gradients::zeros_like(model);
    let mut p1 = Tensor::zeros(&[m, nc]);
    let mut p2 = Tensor::zeros(&[m, nc]);
    let ranges = chunk_ranges(m);
    let wave_len = rayon::current_num_threads().min(WAVE).max(1);
    for wave in ranges.chunks(wave_len) {
        let parts: Vec<(Vec<Tensor>, Vec<Tensor>, Tensor, Tensor)> = wave
            .par_iter()
            .map(|&(s, e)| {
                let tr1 = model.forward_chunk(x1.slice_rows(s, e));
                let p1c = tr1.probs().clone();
                let (_, dx1c) = model.backward_chunk(&tr1, dissim_generation_seed(&p1c, s));
                let mut x2c = x1.slice_rows(s, e);
                for (o, g) in x2c.data_mut().iter_mut().zip(dx1c.data()) {
                    *o = (*o + eps2 * sign(*g)).clamp(lo, hi);
                }
                let tr2 = model.forward_chunk(x2c);
                let p2c = tr2.probs().clone();
                let seed2 = softmax_backward(&p2c, &ce_dq(&p1c, &p2c, lam_m));
                let (gd, _) = model.backward_chunk(&tr2, seed2);
                drop(tr2);
                let tc = targets.targets.slice_rows(s, e);
                let mut seed1 = fused_ce_logits_grad(&tc, &p1c, (1.0 - alpha) * inv_m);
                let dissim_dp1 = softmax_backward(&p1c, &ce_dp(&p2c, lam_m));
                for (sv, d) in seed1.data_mut().iter_mut().zip(dissim_dp1.data()) {
                    *sv += d;
                }
                let (ga, _) = model.backward_chunk(&tr1, seed1);
                (ga, gd, p1c, p2c)
            })
            .collect();
        for (&(s, e), (ga, gd, p1c, p2c)) in wave.iter().zip(parts) {
            for (a, (y1, y2)) in g_x.tensors.iter_mut().zip(ga.iter().zip(&gd)) {
                for ((xv, v1), v2) in a.data_mut().iter_mut().zip(y1.data()).zip(y2.data()) {
                    *xv += v1;
                    *xv += v2;
                }
            }
            p1.data_mut()[s * nc..e * nc].copy_from_slice(p1c.data());
            p2.data_mut()[s * nc..e * nc].copy_from_slice(p2c.data());
        }
    }
    if p1.has_non_finite() || p2.has_non_finite() {
        return Err(Error::NumericFailure(
            "non-finite probability in forward pass".into(),
        ));
    }

    grads.scale(alpha);
    grads.axpy(1.0, &g_x);

    let adv = cross_entropy(&targets.targets, &p1)?;
    let dissim = cross_entropy(&p1, &p2)?;
    Ok((grads, LossParts { clean, adv, dissim }))
}
