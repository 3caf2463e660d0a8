//! The four training procedures that produce a watermarked model.
//!
//! - `vanilla`: minimize the clean loss plus `alpha` times the watermark
//!   loss on mixed batches under standard BatchNorm.
//! - `ew`: fine-tune a pretrained model with exponentially reweighted
//!   weights; gradients flow through the reweighting, and the released model
//!   carries the baked reweighted values.
//! - `cw`: the watermark-batch gradient is averaged over randomly perturbed
//!   weights at increasing noise levels.
//! - `app`: each step finds the worst-case parametric perturbation of the
//!   watermark loss inside a relative-norm ball and descends the watermark
//!   loss at that perturbed point, normalizing watermark batches with
//!   clean-batch statistics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    collect_bn_stats, loss_and_grad, sgd_step, weighted_loss_and_grad,
    weighted_loss_grad_collecting, BnMode, GradientSet, LrSchedule, ModelState,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::watermark::{benign_accuracy, wsr};

/// Whether the perturbation-budget norm spans all trainable parameters or
/// only weight matrices. The plain reading of the perturbation rule includes
/// everything trainable; the flag exists for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    AllTrainable,
    WeightsOnly,
}

fn scoped_param_norm(model: &ModelState, scope: NormScope) -> f64 {
    match scope {
        NormScope::AllTrainable => model.param_l2_norm(),
        NormScope::WeightsOnly => model
            .params
            .iter()
            .filter(|(k, _)| k.ends_with(".weight"))
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedder {
    Vanilla,
    Ew,
    Cw,
    App,
}

/// Declarative training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub embedder: Embedder,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_clean")]
    pub batch_clean: usize,
    #[serde(default = "default_batch_wm")]
    pub batch_wm: usize,
    #[serde(default = "default_lr")]
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Watermark-loss coefficient.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Relative perturbation budget for the APP maximization step.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_ew_temperature")]
    pub ew_temperature: f64,
    #[serde(default = "default_cw_levels")]
    pub cw_levels: usize,
    #[serde(default = "default_cw_sigma")]
    pub cw_sigma: f64,
    #[serde(default = "default_cw_samples")]
    pub cw_samples: usize,
    /// Normalize watermark batches with clean-batch statistics during APP.
    /// Disabling gives the APP-without-c-BN ablation (the watermark batch is
    /// then normalized with its own frozen statistics).
    #[serde(default = "default_true")]
    pub cbn: bool,
    #[serde(default)]
    pub decay_bn_affine: bool,
    #[serde(default)]
    pub norm_scope: NormScope,
    /// Re-estimate BatchNorm running statistics on (up to 1024 samples of)
    /// the clean training data at the end of the final epoch, before the
    /// closing evaluation. Removes watermark contamination from the
    /// released statistics; the landscape origin cell then reproduces the
    /// checkpoint metrics exactly.
    #[serde(default)]
    pub final_bn_recalibration: bool,
    /// Epochs of pure clean training before the watermark term engages.
    /// Small networks can collapse into the target class when the watermark
    /// loss dominates an untrained model; a short warmup avoids that.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Re-derive and cross-check the injected clean statistics and the
    /// parameter restoration every step (slower; used by invariant tests).
    #[serde(default)]
    pub verify_invariants: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    20
}
fn default_batch_clean() -> usize {
    32
}
fn default_batch_wm() -> usize {
    8
}
fn default_lr() -> LrSchedule {
    LrSchedule { initial: 0.05, milestones: vec![10, 15], factor: 0.1 }
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_alpha() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    0.02
}
fn default_ew_temperature() -> f64 {
    2.0
}
fn default_cw_levels() -> usize {
    4
}
fn default_cw_sigma() -> f64 {
    0.01
}
fn default_cw_samples() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl TrainPlan {
    pub fn with_embedder(embedder: Embedder, seed: u64) -> Self {
        TrainPlan {
            embedder,
            epochs: default_epochs(),
            batch_clean: default_batch_clean(),
            batch_wm: default_batch_wm(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            ew_temperature: default_ew_temperature(),
            cw_levels: default_cw_levels(),
            cw_sigma: default_cw_sigma(),
            cw_samples: default_cw_samples(),
            cbn: true,
            decay_bn_affine: false,
            norm_scope: NormScope::AllTrainable,
            final_bn_recalibration: false,
            warmup_epochs: 0,
            verify_invariants: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("train.epochs must be at least 1".to_string());
        }
        if self.batch_clean == 0 || self.batch_wm == 0 {
            problems.push("train.batch_clean and train.batch_wm must be at least 1".to_string());
        }
        if self.alpha < 0.0 {
            problems.push(format!("train.alpha must be >= 0, got {}", self.alpha));
        }
        if self.epsilon < 0.0 {
            problems.push(format!("train.epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.lr.initial <= 0.0 {
            problems.push(format!("train.lr.initial must be positive, got {}", self.lr.initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.ew_temperature <= 0.0 {
            problems.push(format!(
                "train.ew_temperature must be positive, got {}",
                self.ew_temperature
            ));
        }
        if self.cw_levels == 0 || self.cw_samples == 0 {
            problems.push("train.cw_levels and train.cw_samples must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Fixed evaluation sets reported once per epoch.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub clean_test: LabeledDataset,
    pub wm_test: LabeledDataset,
    pub target: usize,
}

impl EvalSuite {
    pub fn measure(&self, model: &ModelState) -> Result<(f64, f64)> {
        let ba = benign_accuracy(model, &self.clean_test)?;
        let rate = wsr(model, &self.wm_test, self.target)?;
        Ok((ba, rate))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub wm_loss: f64,
    pub ba: f64,
    pub wsr: f64,
}

/// Per-epoch training trace plus APP step diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    /// `||delta|| / (epsilon * ||theta||)` for every APP step that perturbed.
    pub budget_ratios: Vec<f64>,
    /// Steps where a vanishing watermark gradient made the normalized
    /// direction undefined and the perturbation was skipped.
    pub perturbation_skips: usize,
}

impl TrainReport {
    fn record_epoch(
        &mut self,
        epoch: usize,
        clean_loss: f64,
        wm_loss: f64,
        model: &ModelState,
        eval: &EvalSuite,
    ) -> Result<()> {
        if !clean_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("clean loss became {clean_loss}"),
            });
        }
        let (ba, rate) = eval.measure(model)?;
        self.epochs.push(EpochRecord { epoch, clean_loss, wm_loss, ba, wsr: rate });
        Ok(())
    }
}

/// End-of-training BatchNorm recalibration over the clean training data,
/// capped at the same sample count the landscape scan uses per cell.
fn maybe_recalibrate(
    model: &mut ModelState,
    plan: &TrainPlan,
    epoch: usize,
    clean: &LabeledDataset,
) -> Result<()> {
    if plan.final_bn_recalibration && epoch + 1 == plan.epochs {
        let cap = clean.len().min(1024);
        let idx: Vec<usize> = (0..cap).collect();
        crate::nn::bn_reestimate(model, &clean.images.gather0(&idx), 1)?;
    }
    Ok(())
}

/// Draw a watermark mini-batch (with replacement) from the watermark set.
fn sample_wm_batch(wm: &LabeledDataset, m: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..m).map(|_| rng.below(wm.len())).collect();
    (wm.images.gather0(&idx), idx.iter().map(|&i| wm.labels[i]).collect())
}

/// Shuffled clean-batch index chunks for one epoch.
fn epoch_chunks(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Vanilla watermark embedding: mixed clean/watermark batches, standard
/// BatchNorm, loss `mean_ce(clean) + alpha * mean_ce(wm)`. With `alpha == 0`
/// (or no watermark set) this is plain clean training and doubles as the
/// no-watermark control.
pub fn train_vanilla(
    mut model: ModelState,
    plan: &TrainPlan,
    clean: &LabeledDataset,
    wm: Option<&LabeledDataset>,
    eval: &EvalSuite,
) -> Result<(ModelState, TrainReport)> {
    plan.validate()?;
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut velocity = GradientSet::zeros_like(&model);
    for epoch in 0..plan.epochs {
        let use_wm = plan.alpha > 0.0 && wm.is_some() && epoch >= plan.warmup_epochs;
        let lr = plan.lr.at_epoch(epoch);
        let mut order_rng = Rng::stream(plan.seed, &format!("vanilla-epoch-{epoch}"));
        let mut wm_rng = Rng::stream(plan.seed, &format!("vanilla-wm-{epoch}"));
        let mut clean_sum = 0.0;
        let mut wm_sum = 0.0;
        let mut steps = 0.0;
        for chunk in epoch_chunks(clean.len(), plan.batch_clean, &mut order_rng) {
            let images = clean.images.gather0(&chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| clean.labels[i]).collect();
            let nc = chunk.len();
            let (batch, batch_labels, weights) = if use_wm {
                let (wm_images, wm_labels) =
                    sample_wm_batch(wm.unwrap(), plan.batch_wm, &mut wm_rng);
                let m = wm_labels.len();
                let mut w = vec![1.0 / nc as f64; nc];
                w.extend(vec![plan.alpha / m as f64; m]);
                let mut all_labels = labels;
                all_labels.extend(wm_labels);
                (Tensor::concat0(&images, &wm_images), all_labels, w)
            } else {
                (images, labels, vec![1.0 / nc as f64; nc])
            };
            let bg = weighted_loss_and_grad(
                &mut model,
                &batch,
                &batch_labels,
                &weights,
                &BnMode::TrainStandard,
            )?;
            if !bg.loss.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite step loss".into() });
            }
            clean_sum += bg.per_sample_ce[..nc].iter().sum::<f64>() / nc as f64;
            if use_wm {
                let m = bg.per_sample_ce.len() - nc;
                wm_sum += bg.per_sample_ce[nc..].iter().sum::<f64>() / m as f64;
            }
            sgd_step(
                &mut model,
                &bg.grads,
                lr,
                plan.momentum,
                plan.weight_decay,
                plan.decay_bn_affine,
                &mut velocity,
            )?;
            steps += 1.0;
        }
        let wm_loss = if use_wm { wm_sum / steps } else { f64::NAN };
        maybe_recalibrate(&mut model, plan, epoch, clean)?;
        report.record_epoch(epoch, clean_sum / steps, wm_loss, &model, eval)?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Exponential reweighting of one parameter tensor: element `i` maps to
/// `exp(|t_i| T) / max_j exp(|t_j| T) * t_i`. The maximal-magnitude element
/// is unchanged and every sign is preserved.
pub fn ew_reweight(layer: &Tensor, temperature: f64) -> Result<Tensor> {
    if layer.numel() == 0 {
        return Err(Error::Argument("cannot reweight an empty layer".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Argument(format!(
            "reweight temperature must be positive, got {temperature}"
        )));
    }
    let max_abs = layer.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = layer.clone();
    for v in out.data_mut() {
        *v *= ((v.abs() - max_abs) * temperature).exp();
    }
    Ok(out)
}

/// Model with every `.weight` tensor exponentially reweighted; biases and
/// BatchNorm affine parameters pass through.
pub fn ew_apply(model: &ModelState, temperature: f64) -> Result<ModelState> {
    let mut out = model.clone();
    for (name, t) in out.params.iter_mut() {
        if name.ends_with(".weight") {
            *t = ew_reweight(t, temperature)?;
        }
    }
    Ok(out)
}

/// Map gradients taken with respect to the reweighted weights back to the
/// raw parameters. For `y_i = f_i * t_i` with `f_i = exp((|t_i| - |t_a|) T)`
/// and `a` the argmax of `|t|`:
///
/// ```text
/// dL/dt_i = g_i * f_i * (1 + T |t_i|)              (i != a)
/// dL/dt_a = g_a - T sign(t_a) * sum_{i != a} g_i y_i
/// ```
fn ew_chain_grads(
    raw: &ModelState,
    temperature: f64,
    grads_reweighted: &GradientSet,
) -> GradientSet {
    let mut out = grads_reweighted.clone();
    for (name, g) in out.tensors.iter_mut() {
        if !name.ends_with(".weight") {
            continue;
        }
        let t = &raw.params[name];
        let td = t.data();
        let mut argmax = 0usize;
        for (i, v) in td.iter().enumerate() {
            if v.abs() > td[argmax].abs() {
                argmax = i;
            }
        }
        let max_abs = td[argmax].abs();
        let gd = g.data_mut();
        let mut cross = 0.0;
        for i in 0..td.len() {
            if i == argmax {
                continue;
            }
            let f = ((td[i].abs() - max_abs) * temperature).exp();
            let y = f * td[i];
            cross += gd[i] * y;
            gd[i] *= f * (1.0 + temperature * td[i].abs());
        }
        gd[argmax] -= temperature * td[argmax].signum() * cross;
    }
    out
}

/// One reweighted-forward step: loss and per-sample cross-entropies come
/// from the network with reweighted weights, gradients are mapped back to
/// the raw parameters, and running statistics advance under the reweighted
/// forward.
pub fn ew_loss_and_grad(
    raw: &mut ModelState,
    temperature: f64,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<crate::nn::BatchGrad> {
    let mut reweighted = ew_apply(raw, temperature)?;
    let bg = weighted_loss_and_grad(
        &mut reweighted,
        batch,
        labels,
        weights,
        &BnMode::TrainStandard,
    )?;
    raw.bn_stats = reweighted.bn_stats;
    let grads = ew_chain_grads(raw, temperature, &bg.grads);
    Ok(crate::nn::BatchGrad { loss: bg.loss, per_sample_ce: bg.per_sample_ce, grads })
}

/// Embed a watermark by fine-tuning a pretrained clean model with
/// exponentially reweighted weights. Forward passes (and the released model)
/// use the reweighted values; gradients flow through the reweighting to the
/// raw parameters.
pub fn train_ew(
    pretrained: ModelState,
    plan: &TrainPlan,
    clean: &LabeledDataset,
    wm: &LabeledDataset,
    eval: &EvalSuite,
) -> Result<(ModelState, TrainReport)> {
    plan.validate()?;
    let start = Instant::now();
    let temperature = plan.ew_temperature;
    let mut raw = pretrained;
    let mut report = TrainReport::default();
    let mut velocity = GradientSet::zeros_like(&raw);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.at_epoch(epoch);
        let mut order_rng = Rng::stream(plan.seed, &format!("ew-epoch-{epoch}"));
        let mut wm_rng = Rng::stream(plan.seed, &format!("ew-wm-{epoch}"));
        let mut clean_sum = 0.0;
        let mut wm_sum = 0.0;
        let mut steps = 0.0;
        for chunk in epoch_chunks(clean.len(), plan.batch_clean, &mut order_rng) {
            let images = clean.images.gather0(&chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| clean.labels[i]).collect();
            let nc = chunk.len();
            let (wm_images, wm_labels) = sample_wm_batch(wm, plan.batch_wm, &mut wm_rng);
            let m = wm_labels.len();
            let mut weights = vec![1.0 / nc as f64; nc];
            weights.extend(vec![plan.alpha / m as f64; m]);
            let batch = Tensor::concat0(&images, &wm_images);
            let mut all_labels = labels;
            all_labels.extend(wm_labels);

            let bg = ew_loss_and_grad(&mut raw, temperature, &batch, &all_labels, &weights)?;
            if !bg.loss.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite step loss".into() });
            }
            let grads = bg.grads;
            clean_sum += bg.per_sample_ce[..nc].iter().sum::<f64>() / nc as f64;
            wm_sum += bg.per_sample_ce[nc..].iter().sum::<f64>() / m as f64;
            sgd_step(
                &mut raw,
                &grads,
                lr,
                plan.momentum,
                plan.weight_decay,
                plan.decay_bn_affine,
                &mut velocity,
            )?;
            steps += 1.0;
        }
        let mut deployed = ew_apply(&raw, temperature)?;
        maybe_recalibrate(&mut deployed, plan, epoch, clean)?;
        // statistics re-estimated on the baked model carry back: raw and
        // baked models share activation statistics
        raw.bn_stats = deployed.bn_stats.clone();
        report.record_epoch(epoch, clean_sum / steps, wm_sum / steps, &deployed, eval)?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    // the released model bakes the reweighted values into plain parameters
    let deployed = ew_apply(&raw, temperature)?;
    Ok((deployed, report))
}

/// Noisy-weight gradient estimate: the average over `levels` noise levels
/// (and `samples` draws per level) of the gradient at `theta + G`, with
/// `G ~ N(0, (sigma * i / levels)^2 I)`. Each pass uses train-mode
/// normalization (gradients flow through the batch statistics) without
/// touching the running estimates. `sigma == 0` collapses to the plain
/// gradient, bitwise.
pub fn cw_gradient(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    levels: usize,
    sigma: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, GradientSet)> {
    if levels == 0 || samples == 0 {
        return Err(Error::Argument("cw gradient needs levels >= 1 and samples >= 1".into()));
    }
    if sigma < 0.0 {
        return Err(Error::Argument(format!("cw sigma must be >= 0, got {sigma}")));
    }
    let n = batch.extent0();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let uniform = vec![1.0 / n as f64; n];
    let plain_grad = |m: &ModelState| -> Result<(f64, GradientSet)> {
        let bg = crate::nn::frozen_batch_loss_and_grad(m, batch, labels, &uniform)?;
        Ok((bg.loss, bg.grads))
    };
    if sigma == 0.0 {
        return plain_grad(model);
    }
    let mut total: Option<GradientSet> = None;
    let mut loss_sum = 0.0;
    let mut draws = 0.0;
    for level in 1..=levels {
        let std = sigma * level as f64 / levels as f64;
        for _ in 0..samples {
            let mut noise = GradientSet::zeros_like(model);
            for t in noise.tensors.values_mut() {
                for v in t.data_mut() {
                    *v = rng.normal() * std;
                }
            }
            let perturbed = model.add_scaled(&noise, 1.0)?;
            let (loss, grads) = plain_grad(&perturbed)?;
            loss_sum += loss;
            draws += 1.0;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.add_scaled_in_place(&grads, 1.0),
            }
        }
    }
    let mut grads = total.expect("at least one draw");
    grads.scale(1.0 / draws);
    Ok((loss_sum / draws, grads))
}

/// Watermark embedding with the noisy-gradient estimator: clean batches
/// contribute a standard gradient, the watermark batch contributes the
/// noisy-weight average.
pub fn train_cw(
    mut model: ModelState,
    plan: &TrainPlan,
    clean: &LabeledDataset,
    wm: &LabeledDataset,
    eval: &EvalSuite,
) -> Result<(ModelState, TrainReport)> {
    plan.validate()?;
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut velocity = GradientSet::zeros_like(&model);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.at_epoch(epoch);
        let mut order_rng = Rng::stream(plan.seed, &format!("cw-epoch-{epoch}"));
        let mut wm_rng = Rng::stream(plan.seed, &format!("cw-wm-{epoch}"));
        let mut noise_rng = Rng::stream(plan.seed, &format!("cw-noise-{epoch}"));
        let mut clean_sum = 0.0;
        let mut wm_sum = 0.0;
        let mut steps = 0.0;
        for chunk in epoch_chunks(clean.len(), plan.batch_clean, &mut order_rng) {
            let images = clean.images.gather0(&chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| clean.labels[i]).collect();
            let (loss_c, mut grads) =
                loss_and_grad(&mut model, &images, &labels, &BnMode::TrainStandard)?;
            if !loss_c.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite step loss".into() });
            }
            clean_sum += loss_c;
            if epoch >= plan.warmup_epochs {
                let (wm_images, wm_labels) = sample_wm_batch(wm, plan.batch_wm, &mut wm_rng);
                let (loss_w, g_wm) = cw_gradient(
                    &model,
                    &wm_images,
                    &wm_labels,
                    plan.cw_levels,
                    plan.cw_sigma,
                    plan.cw_samples,
                    &mut noise_rng,
                )?;
                if !loss_w.is_finite() {
                    return Err(Error::Training { epoch, detail: "non-finite step loss".into() });
                }
                grads.add_scaled_in_place(&g_wm, plan.alpha);
                wm_sum += loss_w;
            }
            sgd_step(
                &mut model,
                &grads,
                lr,
                plan.momentum,
                plan.weight_decay,
                plan.decay_bn_affine,
                &mut velocity,
            )?;
            steps += 1.0;
        }
        let wm_loss = if epoch < plan.warmup_epochs { f64::NAN } else { wm_sum / steps };
        maybe_recalibrate(&mut model, plan, epoch, clean)?;
        report.record_epoch(epoch, clean_sum / steps, wm_loss, &model, eval)?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Floor below which the watermark-gradient norm makes the normalized
/// direction undefined; such steps skip the perturbation.
const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Adversarial-parametric-perturbation embedding with clean-sample
/// BatchNorm. Every iteration:
///
/// 1. clean-batch gradient `g` under standard BatchNorm (running statistics
///    update here and only here);
/// 2. clean-batch statistics summarized from that same pass;
/// 3. watermark-batch gradient under the injected statistics, normalized to
///    unit length and scaled by `epsilon * ||theta||` to form the
///    perturbation;
/// 4. the watermark gradient is re-taken at the perturbed parameters (same
///    injected statistics) and added to `g` with weight `alpha`;
/// 5. one SGD step; the perturbation never leaks into the stored parameters.
///
/// With `plan.cbn` off, step 3 normalizes the watermark batch with its own
/// frozen statistics instead (the ablation arm). With `epsilon == 0` the
/// procedure degenerates to vanilla training with clean-normalized watermark
/// batches.
pub fn train_app(
    mut model: ModelState,
    plan: &TrainPlan,
    clean: &LabeledDataset,
    wm: &LabeledDataset,
    eval: &EvalSuite,
) -> Result<(ModelState, TrainReport)> {
    plan.validate()?;
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut velocity = GradientSet::zeros_like(&model);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.at_epoch(epoch);
        let mut order_rng = Rng::stream(plan.seed, &format!("app-epoch-{epoch}"));
        let mut wm_rng = Rng::stream(plan.seed, &format!("app-wm-{epoch}"));
        let mut clean_sum = 0.0;
        let mut wm_sum = 0.0;
        let mut steps = 0.0;
        for chunk in epoch_chunks(clean.len(), plan.batch_clean, &mut order_rng) {
            let images = clean.images.gather0(&chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| clean.labels[i]).collect();
            let nc = chunk.len();
            let uniform = vec![1.0 / nc as f64; nc];
            let (bg_clean, clean_summary) =
                weighted_loss_grad_collecting(&mut model, &images, &labels, &uniform)?;
            if !bg_clean.loss.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite clean loss".into() });
            }
            let mut grads = bg_clean.grads;
            clean_sum += bg_clean.loss;

            if epoch < plan.warmup_epochs {
                sgd_step(
                    &mut model,
                    &grads,
                    lr,
                    plan.momentum,
                    plan.weight_decay,
                    plan.decay_bn_affine,
                    &mut velocity,
                )?;
                steps += 1.0;
                continue;
            }

            let (wm_images, wm_labels) = sample_wm_batch(wm, plan.batch_wm, &mut wm_rng);
            let wm_summary = if plan.cbn {
                clean_summary
            } else {
                collect_bn_stats(&model, &wm_images)?
            };
            if plan.verify_invariants && plan.cbn {
                let recollected = collect_bn_stats(&model, &images)?;
                if recollected.checksum() != wm_summary.checksum() {
                    return Err(Error::Numeric(
                        "clean-batch statistics drifted between collection and use".into(),
                    ));
                }
            }
            let mode = BnMode::CleanStats(&wm_summary);
            let (wm_loss_at_theta, g_w) =
                loss_and_grad(&mut model, &wm_images, &wm_labels, &mode)?;
            let g_norm = g_w.l2_norm();
            let theta_norm = scoped_param_norm(&model, plan.norm_scope);

            let wm_loss = if plan.epsilon > 0.0 && g_norm > GRAD_NORM_FLOOR {
                let mut delta = g_w;
                delta.scale(plan.epsilon * theta_norm / g_norm);
                report
                    .budget_ratios
                    .push(delta.l2_norm() / (plan.epsilon * theta_norm));
                let checksum_before = model.param_checksum();
                let mut perturbed = model.add_scaled(&delta, 1.0)?;
                let (wm_loss_p, g_wp) =
                    loss_and_grad(&mut perturbed, &wm_images, &wm_labels, &mode)?;
                if model.param_checksum() != checksum_before {
                    return Err(Error::Numeric(
                        "parameters changed while evaluating the perturbed gradient".into(),
                    ));
                }
                grads.add_scaled_in_place(&g_wp, plan.alpha);
                wm_loss_p
            } else {
                if plan.epsilon > 0.0 {
                    report.perturbation_skips += 1;
                }
                grads.add_scaled_in_place(&g_w, plan.alpha);
                wm_loss_at_theta
            };
            if !wm_loss.is_finite() {
                return Err(Error::Training { epoch, detail: "non-finite watermark loss".into() });
            }
            wm_sum += wm_loss;
            sgd_step(
                &mut model,
                &grads,
                lr,
                plan.momentum,
                plan.weight_decay,
                plan.decay_bn_affine,
                &mut velocity,
            )?;
            steps += 1.0;
        }
        let wm_loss = if epoch < plan.warmup_epochs { f64::NAN } else { wm_sum / steps };
        maybe_recalibrate(&mut model, plan, epoch, clean)?;
        report.record_epoch(epoch, clean_sum / steps, wm_loss, &model, eval)?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Dispatch on the plan's embedder. `pretrained` is consulted by the EW arm
/// (which fine-tunes an existing clean model); the others train `model` from
/// its current state.
pub fn train(
    model: ModelState,
    plan: &TrainPlan,
    clean: &LabeledDataset,
    wm: Option<&LabeledDataset>,
    eval: &EvalSuite,
) -> Result<(ModelState, TrainReport)> {
    let need_wm = || {
        wm.ok_or_else(|| {
            Error::Argument("this embedder requires a watermark training set".into())
        })
    };
    match plan.embedder {
        Embedder::Vanilla => train_vanilla(model, plan, clean, wm, eval),
        Embedder::Ew => train_ew(model, plan, clean, need_wm()?, eval),
        Embedder::Cw => train_cw(model, plan, clean, need_wm()?, eval),
        Embedder::App => train_app(model, plan, clean, need_wm()?, eval),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{builtin_shapes, SplitRole};
    use crate::nn::build_model;
    use crate::watermark::{build_watermarked_trainset, watermark_testset, WatermarkKind, WatermarkSpec};

    #[test]
    fn ew_reweight_matches_direct_formula() {
        // oracle: [2, -1, 0] at T = 1 -> [2, -e^{-1}, 0]
        let layer = Tensor::new(vec![3], vec![2.0, -1.0, 0.0]);
        let out = ew_reweight(&layer, 1.0).unwrap();
        assert_eq!(out.data()[0], 2.0);
        assert!((out.data()[1] + (-1.0f64).exp()).abs() < 1e-12, "{}", out.data()[1]);
        assert!((out.data()[1] + 0.36788).abs() < 1e-4);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn ew_reweight_keeps_the_max_magnitude_element() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let data: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
            let layer = Tensor::new(vec![24], data.clone());
            let out = ew_reweight(&layer, 2.0).unwrap();
            let argmax = (0..24)
                .max_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()))
                .unwrap();
            assert_eq!(out.data()[argmax], data[argmax], "max element moved");
            for (o, t) in out.data().iter().zip(&data) {
                assert_eq!(o.signum() * t.signum() < 0.0, false, "sign flipped");
                assert!(o.abs() <= t.abs() + 1e-15, "magnitude grew: {t} -> {o}");
            }
        }
    }

    #[test]
    fn ew_reweight_tiny_temperature_is_identity_limit() {
        let layer = Tensor::new(vec![4], vec![0.5, -0.25, 1.5, 0.0]);
        let out = ew_reweight(&layer, 1e-12).unwrap();
        for (o, t) in out.data().iter().zip(layer.data()) {
            assert!((o - t).abs() <= 1e-11, "{o} vs {t}");
        }
    }

    #[test]
    fn ew_reweight_rejects_empty_and_nonpositive_temperature() {
        assert!(ew_reweight(&Tensor::zeros(vec![0]), 1.0).is_err());
        assert!(ew_reweight(&Tensor::zeros(vec![2]), 0.0).is_err());
    }

    fn tiny_fixture() -> (ModelState, LabeledDataset, LabeledDataset, EvalSuite) {
        let mut rng = Rng::stream(51, "init");
        let model = build_model("tinycnn", (1, 16, 16), 5, &mut rng).unwrap();
        let owner = builtin_shapes(5, 240, 16, 50, SplitRole::OwnerTrain).unwrap();
        let test = builtin_shapes(5, 100, 16, 52, SplitRole::Test).unwrap();
        let spec = WatermarkSpec {
            kind: WatermarkKind::Noise { amplitude: 0.25 },
            target_label: 0,
            seed: 50,
        };
        let (clean, wm) = build_watermarked_trainset(&owner, &spec, 0.05).unwrap();
        let wm_test = watermark_testset(&test, &spec).unwrap();
        let eval = EvalSuite { clean_test: test, wm_test, target: 0 };
        (model, clean, wm, eval)
    }

    fn short_plan(embedder: Embedder) -> TrainPlan {
        let mut plan = TrainPlan::with_embedder(embedder, 3);
        plan.epochs = 2;
        plan.lr = LrSchedule::constant(0.02);
        plan.alpha = 0.3;
        plan
    }

    #[test]
    fn vanilla_without_watermark_term_stays_near_chance_wsr() {
        let (model, clean, _, eval) = tiny_fixture();
        let mut plan = short_plan(Embedder::Vanilla);
        plan.alpha = 0.0;
        let (_, report) = train_vanilla(model, &plan, &clean, None, &eval).unwrap();
        let last = report.epochs.last().unwrap();
        assert!(last.wsr < 0.5, "wsr {} should sit near chance", last.wsr);
        assert!(last.wm_loss.is_nan());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (model, clean, wm, eval) = tiny_fixture();
        let plan = short_plan(Embedder::Vanilla);
        let (m1, r1) = train_vanilla(model.clone(), &plan, &clean, Some(&wm), &eval).unwrap();
        let (m2, r2) = train_vanilla(model, &plan, &clean, Some(&wm), &eval).unwrap();
        assert_eq!(m1.param_checksum(), m2.param_checksum());
        assert_eq!(r1.epochs, r2.epochs);
    }

    #[test]
    fn app_budget_ratio_is_exact_and_restoration_holds() {
        let (model, clean, wm, eval) = tiny_fixture();
        let mut plan = short_plan(Embedder::App);
        plan.verify_invariants = true;
        let (_, report) = train_app(model, &plan, &clean, &wm, &eval).unwrap();
        assert!(!report.budget_ratios.is_empty());
        for (i, r) in report.budget_ratios.iter().enumerate() {
            assert!(
                (r - 1.0).abs() <= 1e-9,
                "step {i}: |delta| deviates from eps * |theta| by {:.3e}",
                (r - 1.0).abs()
            );
        }
    }

    #[test]
    fn app_with_zero_epsilon_runs_the_cbn_only_arm() {
        let (model, clean, wm, eval) = tiny_fixture();
        let mut plan = short_plan(Embedder::App);
        plan.epsilon = 0.0;
        let (_, report) = train_app(model, &plan, &clean, &wm, &eval).unwrap();
        assert!(report.budget_ratios.is_empty());
        assert_eq!(report.perturbation_skips, 0);
    }

    #[test]
    fn cw_gradient_with_zero_sigma_is_bitwise_plain() {
        let (model, clean, _, _) = tiny_fixture();
        let idx: Vec<usize> = (0..16).collect();
        let batch = clean.images.gather0(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| clean.labels[i]).collect();
        let mut rng = Rng::new(5);
        let (loss, grads) = cw_gradient(&model, &batch, &labels, 4, 0.0, 2, &mut rng).unwrap();
        // the plain gradient: standard train-mode normalization, gradients
        // flowing through the batch statistics
        let mut probe = model.clone();
        let (loss_ref, grads_ref) =
            loss_and_grad(&mut probe, &batch, &labels, &BnMode::TrainStandard).unwrap();
        assert_eq!(loss, loss_ref);
        assert_eq!(grads, grads_ref);
    }

    #[test]
    fn cw_gradient_single_draw_matches_shifted_model() {
        let (model, clean, _, _) = tiny_fixture();
        let idx: Vec<usize> = (0..8).collect();
        let batch = clean.images.gather0(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| clean.labels[i]).collect();
        let sigma = 0.01;
        let (_, grads) = cw_gradient(&model, &batch, &labels, 1, sigma, 1, &mut Rng::new(9)).unwrap();

        // reconstruct the single draw with the same stream
        let mut rng = Rng::new(9);
        let mut noise = GradientSet::zeros_like(&model);
        for t in noise.tensors.values_mut() {
            for v in t.data_mut() {
                *v = rng.normal() * sigma;
            }
        }
        let shifted = model.add_scaled(&noise, 1.0).unwrap();
        let mut probe = shifted.clone();
        let (_, oracle) =
            loss_and_grad(&mut probe, &batch, &labels, &BnMode::TrainStandard).unwrap();
        assert_eq!(grads, oracle);
    }

    #[test]
    fn cw_gradient_mean_approaches_plain_gradient_at_small_sigma() {
        // oracle: sample-mean confidence band around the noiseless gradient
        let mut rng = Rng::stream(60, "init");
        let model = crate::nn::ModelState::init(
            "custom",
            vec![
                crate::nn::LayerSpec::Flatten,
                crate::nn::LayerSpec::Dense { inputs: 16, outputs: 3 },
            ],
            (1, 4, 4),
            &mut rng,
        );
        let images = Tensor::new(vec![6, 1, 4, 4], (0..96).map(|i| (i % 7) as f64 / 7.0).collect());
        let labels = vec![0, 1, 2, 0, 1, 2];
        let (_, plain) =
            cw_gradient(&model, &images, &labels, 1, 0.0, 1, &mut Rng::new(1)).unwrap();
        let draws = 300;
        let (_, noisy) =
            cw_gradient(&model, &images, &labels, 1, 0.005, draws, &mut Rng::new(2)).unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (name, t) in &plain.tensors {
            for (a, b) in t.data().iter().zip(noisy.tensors[name].data()) {
                diff += (a - b) * (a - b);
                norm += a * a;
            }
        }
        let rel = (diff / norm.max(1e-12)).sqrt();
        assert!(rel < 0.05, "sample mean is {rel:.4} relative away from the plain gradient");
    }

    #[test]
    fn ew_tiny_temperature_matches_vanilla_losses() {
        let (model, clean, wm, eval) = tiny_fixture();
        let mut ew_plan = short_plan(Embedder::Ew);
        ew_plan.ew_temperature = 1e-9;
        // vanilla path must consume identical batches: reuse the ew streams
        let (_, ew_report) = train_ew(model.clone(), &ew_plan, &clean, &wm, &eval).unwrap();
        let mut rng = Rng::stream(ew_plan.seed, "ew-epoch-0");
        drop(rng.next_u64());
        // hand-rolled vanilla pass over the same schedule for loss comparison
        let mut reference = model;
        let mut velocity = GradientSet::zeros_like(&reference);
        let mut clean_losses = Vec::new();
        for epoch in 0..ew_plan.epochs {
            let lr = ew_plan.lr.at_epoch(epoch);
            let mut order_rng = Rng::stream(ew_plan.seed, &format!("ew-epoch-{epoch}"));
            let mut wm_rng = Rng::stream(ew_plan.seed, &format!("ew-wm-{epoch}"));
            let mut sum = 0.0;
            let mut steps = 0.0;
            for chunk in epoch_chunks(clean.len(), ew_plan.batch_clean, &mut order_rng) {
                let images = clean.images.gather0(&chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| clean.labels[i]).collect();
                let nc = chunk.len();
                let (wm_images, wm_labels) = sample_wm_batch(&wm, ew_plan.batch_wm, &mut wm_rng);
                let m = wm_labels.len();
                let mut weights = vec![1.0 / nc as f64; nc];
                weights.extend(vec![ew_plan.alpha / m as f64; m]);
                let batch = Tensor::concat0(&images, &wm_images);
                let mut all_labels = labels;
                all_labels.extend(wm_labels);
                let bg = weighted_loss_and_grad(
                    &mut reference,
                    &batch,
                    &all_labels,
                    &weights,
                    &BnMode::TrainStandard,
                )
                .unwrap();
                sum += bg.per_sample_ce[..nc].iter().sum::<f64>() / nc as f64;
                sgd_step(
                    &mut reference,
                    &bg.grads,
                    lr,
                    ew_plan.momentum,
                    ew_plan.weight_decay,
                    false,
                    &mut velocity,
                )
                .unwrap();
                steps += 1.0;
            }
            clean_losses.push(sum / steps);
        }
        for (e, (got, want)) in ew_report
            .epochs
            .iter()
            .map(|r| r.clean_loss)
            .zip(&clean_losses)
            .enumerate()
        {
            assert!(
                (got - want).abs() < 1e-6,
                "epoch {e}: ew loss {got} vs vanilla loss {want}"
            );
        }
    }
}
