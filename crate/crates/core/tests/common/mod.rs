//! Shared oracles and fixtures for the integration suites.
//!
//! The finite-difference oracle here only ever calls the loss evaluation
//! path; it stays independent of the backward implementation it checks.

#![allow(dead_code)]

use wmlab_core::nn::{batch_loss, loss_and_grad, BnMode, ModelState};
use wmlab_core::rng::Rng;
use wmlab_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Which BatchNorm semantics a gradient check runs under.
#[derive(Clone, Copy, Debug)]
pub enum ModeKind {
    TrainStandard,
    Eval,
    CleanStats,
}

pub const ALL_MODES: [ModeKind; 3] = [ModeKind::TrainStandard, ModeKind::Eval, ModeKind::CleanStats];

fn loss_under(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    kind: ModeKind,
    summary: Option<&wmlab_core::nn::BatchStatsSummary>,
) -> f64 {
    match kind {
        ModeKind::TrainStandard => {
            batch_loss(model, batch, labels, &BnMode::TrainStandard).unwrap()
        }
        ModeKind::Eval => batch_loss(model, batch, labels, &BnMode::Eval).unwrap(),
        // injected statistics are constants in this mode: the summary is
        // collected once from the base model and held fixed while the
        // parameters move
        ModeKind::CleanStats => {
            batch_loss(model, batch, labels, &BnMode::CleanStats(summary.unwrap())).unwrap()
        }
    }
}

fn analytic_grads(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    kind: ModeKind,
    summary: Option<&wmlab_core::nn::BatchStatsSummary>,
) -> wmlab_core::nn::GradientSet {
    let mut m = model.clone();
    let (_, grads) = match kind {
        ModeKind::TrainStandard => {
            loss_and_grad(&mut m, batch, labels, &BnMode::TrainStandard).unwrap()
        }
        ModeKind::Eval => loss_and_grad(&mut m, batch, labels, &BnMode::Eval).unwrap(),
        ModeKind::CleanStats => {
            loss_and_grad(&mut m, batch, labels, &BnMode::CleanStats(summary.unwrap())).unwrap()
        }
    };
    grads
}

/// Central differences at h = 1e-5 carry ~1e-11 of roundoff noise, so
/// magnitudes below 1e-6 cannot be certified to a relative 1e-4 and the
/// denominator floors there (an absolute agreement of 1e-10 instead).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Central finite differences over sampled coordinates of the named
/// parameter tensors. Returns the worst relative error seen together with
/// the number of coordinates checked.
pub fn fd_check_params(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    kind: ModeKind,
    param_names: &[String],
    samples: usize,
    rng: &mut Rng,
) -> (f64, usize) {
    let summary = match kind {
        ModeKind::CleanStats => Some(wmlab_core::nn::collect_bn_stats(model, batch).unwrap()),
        _ => None,
    };
    let grads = analytic_grads(model, batch, labels, kind, summary.as_ref());
    // enumerate (name, index) coordinates of the requested tensors
    let mut coords = Vec::new();
    for name in param_names {
        let t = &model.params[name];
        for i in 0..t.numel() {
            coords.push((name.clone(), i));
        }
    }
    if coords.len() > samples {
        rng.shuffle(&mut coords);
        coords.truncate(samples);
    }
    let mut worst = 0.0f64;
    for (name, i) in &coords {
        let mut plus = model.clone();
        plus.params.get_mut(name).unwrap().data_mut()[*i] += FD_STEP;
        let mut minus = model.clone();
        minus.params.get_mut(name).unwrap().data_mut()[*i] -= FD_STEP;
        let fd = (loss_under(&plus, batch, labels, kind, summary.as_ref())
            - loss_under(&minus, batch, labels, kind, summary.as_ref()))
            / (2.0 * FD_STEP);
        let analytic = grads.tensors[name].data()[*i];
        let err = relative_error(fd, analytic);
        if err > worst {
            worst = err;
        }
        assert!(
            err <= FD_TOLERANCE,
            "{name}[{i}] under {kind:?}: analytic {analytic:.10e}, fd {fd:.10e}, rel err {err:.3e}"
        );
    }
    (worst, coords.len())
}

/// All parameter names of the model.
pub fn all_param_names(model: &ModelState) -> Vec<String> {
    model.params.keys().cloned().collect()
}

/// The full layer/mode gradient-exactness matrix: every layer type under
/// every BatchNorm mode, at least 100 sampled coordinates per parametric
/// layer, plus the whole two-conv network checked on every parameter.
/// Asserts the 1e-4 tolerance internally; returns (worst error, coordinates
/// checked).
pub fn gradient_exactness_suite() -> (f64, usize) {
    use wmlab_core::nn::LayerSpec;

    let mut worst = 0.0f64;
    let mut total = 0usize;
    let mut run = |model: &ModelState, batch_shape: Vec<usize>, names: &[String], samples: usize| {
        let mut data_rng = Rng::stream(401, "fd-data");
        let batch = random_batch(&mut data_rng, batch_shape, 1.0);
        let labels = random_labels(&mut data_rng, batch.extent0(), model.num_classes());
        for kind in ALL_MODES {
            let mut sample_rng = Rng::stream(402, "fd-sample");
            let (w, n) = fd_check_params(model, &batch, &labels, kind, names, samples, &mut sample_rng);
            worst = worst.max(w);
            total += n;
        }
    };

    let mut rng = Rng::stream(1001, "init");
    let dense = ModelState::init(
        "custom",
        vec![
            LayerSpec::Dense { inputs: 12, outputs: 10 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 10, outputs: 4 },
        ],
        (12, 1, 1),
        &mut rng,
    );
    run(&dense, vec![6, 12], &all_param_names(&dense), 120);

    let mut rng = Rng::stream(1002, "init");
    let conv = ModelState::init(
        "custom",
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 6, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 6 * 6 * 6, outputs: 3 },
        ],
        (2, 6, 6),
        &mut rng,
    );
    run(&conv, vec![4, 2, 6, 6], &["l00.weight".into(), "l00.bias".into()], 114);

    let mut rng = Rng::stream(1003, "init");
    let bn_wide = ModelState::init(
        "custom",
        vec![
            LayerSpec::Dense { inputs: 10, outputs: 64 },
            LayerSpec::BatchNorm { channels: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 64, outputs: 4 },
        ],
        (10, 1, 1),
        &mut rng,
    );
    run(&bn_wide, vec![8, 10], &["l01.gamma".into(), "l01.beta".into()], 128);

    let mut rng = Rng::stream(1004, "init");
    let bn_spatial = ModelState::init(
        "custom",
        vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3 },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 4 * 3 * 3, outputs: 3 },
        ],
        (1, 6, 6),
        &mut rng,
    );
    run(&bn_spatial, vec![5, 1, 6, 6], &all_param_names(&bn_spatial), 160);

    let mut rng = Rng::stream(1005, "init");
    let pool = ModelState::init(
        "custom",
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 5, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 5 * 4 * 4, outputs: 3 },
        ],
        (2, 8, 8),
        &mut rng,
    );
    run(&pool, vec![4, 2, 8, 8], &["l00.weight".into(), "l00.bias".into()], 100);

    let mut rng = Rng::stream(1006, "init");
    let full = wmlab_core::nn::build_model("tinycnn", (1, 8, 8), 5, &mut rng).unwrap();
    let count = full.param_count();
    run(&full, vec![8, 1, 8, 8], &all_param_names(&full), count);

    (worst, total)
}

/// Random batch with entries scaled by `spread`.
pub fn random_batch(rng: &mut Rng, shape: Vec<usize>, spread: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * spread).collect();
    Tensor::new(shape, data)
}

pub fn random_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}
