//! Watermark-sample construction and the WSR/BA metrics.
//!
//! Three trigger families: `Content` alpha-blends a built-in monochrome
//! glyph onto the image, `Noise` adds one fixed seeded pattern, and
//! `Unrelated` swaps the image for the next picture from an external
//! directory (cycling with wraparound). Output pixels always stay in [0, 1].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_image_dir_flat, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{forward_eval, ModelState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 5x5 base glyph (a block "T"), rendered by nearest-neighbor scaling.
const GLYPH: [[u8; 5]; 5] = [
    [1, 1, 1, 1, 1],
    [0, 0, 1, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 1, 0, 0],
];

/// Trigger definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WatermarkKind {
    /// Glyph patch of side `round(5 * scale)` pixels blended at `position`
    /// (top-left corner, row/col) with the given opacity.
    Content {
        #[serde(default = "default_transparency")]
        transparency: f64,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default = "default_position")]
        position: (usize, usize),
    },
    /// One fixed uniform-noise pattern in [-amplitude, amplitude], identical
    /// across all samples of a spec, added and clamped.
    Noise {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Replace the image with the next external image from a directory of
    /// IDX files, cycling with wraparound when exhausted.
    Unrelated { dir: PathBuf },
}

fn default_transparency() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.0
}
fn default_position() -> (usize, usize) {
    (1, 1)
}
fn default_amplitude() -> f64 {
    0.1
}

/// Trigger plus target label and generation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    #[serde(flatten)]
    pub kind: WatermarkKind,
    pub target_label: usize,
    pub seed: u64,
}

impl WatermarkSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.target_label >= classes {
            return Err(Error::Config(format!(
                "watermark.target_label {} out of range for {classes} classes",
                self.target_label
            )));
        }
        match &self.kind {
            WatermarkKind::Content { transparency, scale, .. } => {
                if !(0.0..=1.0).contains(transparency) {
                    return Err(Error::Config(format!(
                        "watermark.transparency must be in [0, 1], got {transparency}"
                    )));
                }
                if *scale <= 0.0 {
                    return Err(Error::Config(format!(
                        "watermark.scale must be positive, got {scale}"
                    )));
                }
            }
            WatermarkKind::Noise { amplitude } => {
                if !(0.0..=1.0).contains(amplitude) {
                    return Err(Error::Config(format!(
                        "watermark.amplitude must be in [0, 1], got {amplitude}"
                    )));
                }
            }
            WatermarkKind::Unrelated { .. } => {}
        }
        Ok(())
    }
}

/// Glyph patch bitmap at the requested scale: values are 1.0 on glyph
/// strokes and 0.0 elsewhere, `side x side`.
pub fn glyph_patch(scale: f64) -> Tensor {
    let side = ((5.0 * scale).round() as usize).max(1);
    let mut data = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let gy = (y * 5) / side;
            let gx = (x * 5) / side;
            data[y * side + x] = GLYPH[gy][gx] as f64;
        }
    }
    Tensor::new(vec![side, side], data)
}

/// Stateful applier. Content and noise application are pure per image;
/// the unrelated source advances a cursor through its image pool.
pub struct WatermarkApplier {
    spec: WatermarkSpec,
    patch: Option<Tensor>,
    noise: Option<Tensor>,
    unrelated: Option<(Tensor, usize)>,
}

impl WatermarkApplier {
    /// `image_shape` is the (C, H, W) the applier will be fed.
    pub fn new(spec: &WatermarkSpec, image_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = image_shape;
        let (patch, noise, unrelated) = match &spec.kind {
            WatermarkKind::Content { scale, position, .. } => {
                let patch = glyph_patch(*scale);
                let side = patch.shape()[0];
                if position.0 + side > h || position.1 + side > w {
                    return Err(Error::Argument(format!(
                        "patch of side {side} at {position:?} exceeds {h}x{w} image bounds"
                    )));
                }
                (Some(patch), None, None)
            }
            WatermarkKind::Noise { amplitude } => {
                // non-negative pattern: the brightness shift it induces is
                // what separates clean and watermark batch statistics
                let mut rng = Rng::stream(spec.seed, "noise-pattern");
                let data: Vec<f64> = (0..c * h * w)
                    .map(|_| rng.uniform() * amplitude)
                    .collect();
                (None, Some(Tensor::new(vec![c, h, w], data)), None)
            }
            WatermarkKind::Unrelated { dir } => {
                let pool = load_unrelated_pool(dir, image_shape)?;
                (None, None, Some((pool, 0)))
            }
        };
        Ok(WatermarkApplier { spec: spec.clone(), patch, noise, unrelated })
    }

    /// Watermark one (C, H, W) image. Output values stay in [0, 1].
    pub fn apply(&mut self, image: &Tensor) -> Result<Tensor> {
        match &self.spec.kind {
            WatermarkKind::Content { transparency, position, .. } => {
                let patch = self.patch.as_ref().expect("content applier has a patch");
                apply_content(image, patch, *transparency, *position)
            }
            WatermarkKind::Noise { .. } => {
                let noise = self.noise.as_ref().expect("noise applier has a pattern");
                if noise.shape() != image.shape() {
                    return Err(Error::Argument(format!(
                        "noise pattern shape {:?} does not match image {:?}",
                        noise.shape(),
                        image.shape()
                    )));
                }
                let mut out = image.clone();
                for (o, p) in out.data_mut().iter_mut().zip(noise.data()) {
                    *o = (*o + p).clamp(0.0, 1.0);
                }
                Ok(out)
            }
            WatermarkKind::Unrelated { .. } => {
                let (pool, cursor) = self.unrelated.as_mut().expect("unrelated applier has a pool");
                let img = pool.slice0(*cursor);
                *cursor = (*cursor + 1) % pool.extent0();
                Ok(img)
            }
        }
    }

    /// Watermark a whole (N, C, H, W) stack.
    pub fn apply_all(&mut self, images: &Tensor) -> Result<Tensor> {
        let n = images.extent0();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.apply(&images.slice0(i))?);
        }
        Ok(Tensor::stack0(&out))
    }
}

fn load_unrelated_pool(dir: &Path, image_shape: (usize, usize, usize)) -> Result<Tensor> {
    let (c, h, w) = image_shape;
    let pool = load_image_dir_flat(dir)?;
    let (_, pc, ph, pw) = pool.dims4();
    if (pc, ph, pw) != (c, h, w) {
        return Err(Error::Config(format!(
            "unrelated images are ({pc}, {ph}, {pw}), dataset expects ({c}, {h}, {w})"
        )));
    }
    Ok(pool)
}

fn apply_content(
    image: &Tensor,
    patch: &Tensor,
    transparency: f64,
    position: (usize, usize),
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Argument(format!("expected a (C, H, W) image, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let side = patch.shape()[0];
    let (py, px) = position;
    if py + side > h || px + side > w {
        return Err(Error::Argument(format!(
            "patch of side {side} at {position:?} exceeds {h}x{w} image bounds"
        )));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    let pd = patch.data();
    for ci in 0..c {
        for y in 0..side {
            for x in 0..side {
                let idx = ci * h * w + (py + y) * w + (px + x);
                let p = pd[y * side + x];
                data[idx] = ((1.0 - transparency) * data[idx] + transparency * p).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// One-shot application for the stateless trigger kinds. `Unrelated`
/// consumes its cursor, so repeated one-shot calls always return the first
/// pool image; use a [`WatermarkApplier`] when cycling matters.
pub fn apply_watermark(image: &Tensor, spec: &WatermarkSpec) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Argument(format!("expected a (C, H, W) image, got {shape:?}")));
    }
    let mut applier = WatermarkApplier::new(spec, (shape[0], shape[1], shape[2]))?;
    applier.apply(image)
}

/// Replace a seed-deterministic `fraction` of the clean set with watermarked,
/// target-labeled samples. Returns the untouched remainder and the watermark
/// part; the two index sets partition the input.
pub fn build_watermarked_trainset(
    clean: &LabeledDataset,
    spec: &WatermarkSpec,
    fraction: f64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Argument(format!(
            "watermark fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = clean.len();
    let count = ((n as f64) * fraction).floor() as usize;
    if count == 0 {
        return Err(Error::Argument(format!(
            "fraction {fraction} of {n} samples selects no watermark samples"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::stream(spec.seed, "watermark-selection");
    rng.shuffle(&mut indices);
    let (wm_idx, clean_idx) = indices.split_at(count);
    let mut wm_idx = wm_idx.to_vec();
    let mut clean_idx = clean_idx.to_vec();
    wm_idx.sort_unstable();
    clean_idx.sort_unstable();

    let shape = clean.images.shape();
    let mut applier = WatermarkApplier::new(spec, (shape[1], shape[2], shape[3]))?;
    let wm_images = applier.apply_all(&clean.images.gather0(&wm_idx))?;
    let wm_part = LabeledDataset {
        images: wm_images,
        labels: vec![spec.target_label; count],
        role: clean.role,
    };
    let clean_part = clean.subset(&clean_idx);
    Ok((clean_part, wm_part))
}

/// Watermark every image of a (test) set, keeping the original ground-truth
/// labels so the WSR exclusion rule can apply.
pub fn watermark_testset(test: &LabeledDataset, spec: &WatermarkSpec) -> Result<LabeledDataset> {
    let shape = test.images.shape();
    let mut applier = WatermarkApplier::new(spec, (shape[1], shape[2], shape[3]))?;
    Ok(LabeledDataset {
        images: applier.apply_all(&test.images)?,
        labels: test.labels.clone(),
        role: test.role,
    })
}

const EVAL_BATCH: usize = 256;

/// Eval-mode argmax predictions.
pub fn predict(model: &ModelState, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.extent0();
    let k = model.num_classes();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let stop = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..stop).collect();
        let logits = forward_eval(model, &images.gather0(&idx))?;
        let ld = logits.data();
        for i in 0..(stop - start) {
            let row = &ld[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        start = stop;
    }
    Ok(out)
}

/// Watermark success rate: the fraction of watermark samples classified as
/// the target label, excluding samples whose ground-truth label is already
/// the target. `wm_test` must retain original ground-truth labels.
pub fn wsr(model: &ModelState, wm_test: &LabeledDataset, target: usize) -> Result<f64> {
    let preds = predict(model, &wm_test.images)?;
    let mut hits = 0usize;
    let mut considered = 0usize;
    for (pred, &truth) in preds.iter().zip(&wm_test.labels) {
        if truth == target {
            continue;
        }
        considered += 1;
        if *pred == target {
            hits += 1;
        }
    }
    if considered == 0 {
        return Err(Error::UndefinedMetric(
            "every watermark sample has the target ground-truth label".into(),
        ));
    }
    Ok(hits as f64 / considered as f64)
}

/// Top-1 accuracy on clean data in Eval mode.
pub fn benign_accuracy(model: &ModelState, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let preds = predict(model, &test.images)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Per-class top-1 accuracy; classes absent from the set report NaN.
pub fn per_class_accuracy(model: &ModelState, test: &LabeledDataset) -> Result<Vec<f64>> {
    let k = model.num_classes();
    let preds = predict(model, &test.images)?;
    let mut hit = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (p, &t) in preds.iter().zip(&test.labels) {
        total[t] += 1;
        if *p == t {
            hit[t] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            if total[c] == 0 {
                f64::NAN
            } else {
                hit[c] as f64 / total[c] as f64
            }
        })
        .collect())
}
