//! Parameter-space vicinity scan.
//!
//! The scan spans the plane of two directions anchored at the watermarked
//! model: the adversarial direction (the watermark-loss gradient) and the
//! fine-tuning direction (the displacement after a short fine-tune). Each
//! grid point builds the neighbor
//!
//! ```text
//! theta = theta_w + alpha * (d_adv / |d_adv|) * |theta_w|
//!                 + beta  * (d_ft  / |d_ft|)  * |theta_w|
//! ```
//!
//! re-estimates BatchNorm statistics on clean data, and records WSR and BA.
//! Coordinates are relative distances: the neighbor at `(alpha, 0)` sits at
//! relative distance `|alpha|` from the anchor. Cells are independent and
//! evaluated in parallel; the grid assembler is the single writer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    bn_reestimate, forward_features, loss_and_grad, sgd_step, BnMode, GradientSet, ModelState,
};
use crate::rng::Rng;
use crate::watermark::{benign_accuracy, wsr};

/// The two scan directions with their norms.
#[derive(Debug, Clone)]
pub struct DirectionPair {
    pub d_adv: GradientSet,
    pub d_ft: GradientSet,
    pub adv_norm: f64,
    pub ft_norm: f64,
}

impl DirectionPair {
    pub fn new(d_adv: GradientSet, d_ft: GradientSet) -> Result<Self> {
        let adv_norm = d_adv.l2_norm();
        let ft_norm = d_ft.l2_norm();
        if adv_norm == 0.0 || ft_norm == 0.0 {
            return Err(Error::Numeric("scan directions must be nonzero".into()));
        }
        Ok(DirectionPair { d_adv, d_ft, adv_norm, ft_norm })
    }
}

/// Full-batch watermark-loss gradient at the model, in Eval mode (the scan
/// re-estimates statistics per cell afterwards, so the direction itself uses
/// the frozen running estimates).
pub fn adversarial_direction(
    model: &ModelState,
    wm_data: &LabeledDataset,
) -> Result<GradientSet> {
    if wm_data.is_empty() {
        return Err(Error::Argument("empty watermark set".into()));
    }
    let mut probe = model.clone();
    let (_, grads) = loss_and_grad(
        &mut probe,
        &wm_data.images,
        &wm_data.labels,
        &BnMode::Eval,
    )?;
    if grads.l2_norm() == 0.0 {
        return Err(Error::Numeric("watermark-loss gradient is zero".into()));
    }
    Ok(grads)
}

/// Displacement `theta_ft - theta_w` after `iters` plain-SGD iterations at
/// the given learning rate on the clean holdout.
pub fn finetune_direction(
    model: &ModelState,
    clean_holdout: &LabeledDataset,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<GradientSet> {
    if clean_holdout.is_empty() {
        return Err(Error::Argument("empty holdout".into()));
    }
    let mut tuned = model.clone();
    if iters > 0 {
        let mut velocity = GradientSet::zeros_like(&tuned);
        let mut rng = Rng::stream(seed, "finetune-direction");
        let n = clean_holdout.len();
        let batch = 32usize.min(n);
        for _ in 0..iters {
            let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
            let images = clean_holdout.images.gather0(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| clean_holdout.labels[i]).collect();
            let (loss, grads) =
                loss_and_grad(&mut tuned, &images, &labels, &BnMode::TrainStandard)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch: 0, detail: "fine-tune diverged".into() });
            }
            sgd_step(&mut tuned, &grads, lr, 0.0, 0.0, false, &mut velocity)?;
        }
    }
    let mut direction = GradientSet::zeros_like(model);
    for (name, t) in direction.tensors.iter_mut() {
        let a = tuned.params[name].data();
        let b = model.params[name].data();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = a[i] - b[i];
        }
    }
    Ok(direction)
}

/// Grid specification over integer multiples of `step`: coordinates are
/// `i * step` for `i` in `[round(min/step), round(max/step)]`, so the origin
/// cell is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { alpha_min: -0.05, alpha_max: 0.05, beta_min: -0.05, beta_max: 0.05, step: 0.005 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.step <= 0.0 {
            return Err(Error::Config(format!(
                "landscape.step must be positive, got {}",
                self.step
            )));
        }
        if self.alpha_min > 0.0 || self.alpha_max < 0.0 || self.beta_min > 0.0 || self.beta_max < 0.0
        {
            return Err(Error::Config(
                "landscape grid must contain the origin cell".into(),
            ));
        }
        Ok(())
    }

    fn axis(&self, min: f64, max: f64) -> Vec<f64> {
        let lo = (min / self.step).round() as i64;
        let hi = (max / self.step).round() as i64;
        (lo..=hi).map(|i| i as f64 * self.step).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.axis(self.alpha_min, self.alpha_max)
    }

    pub fn betas(&self) -> Vec<f64> {
        self.axis(self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    pub wsr: f64,
    pub ba: f64,
}

/// Per-cell scan records plus the inputs that produced them.
#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub spec: GridSpec,
    pub cells: Vec<GridCell>,
    pub adv_norm: f64,
    pub ft_norm: f64,
    pub bn_samples: usize,
}

impl LandscapeGrid {
    pub fn cell(&self, alpha: f64, beta: f64) -> Option<&GridCell> {
        let tol = self.spec.step * 1e-6;
        self.cells
            .iter()
            .find(|c| (c.alpha - alpha).abs() < tol && (c.beta - beta).abs() < tol)
    }

    /// Smallest |alpha| with WSR below the threshold along the beta = 0
    /// line, or None when no such cell exists in the grid.
    pub fn smallest_alpha_below(&self, threshold: f64) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.beta == 0.0 && c.wsr < threshold)
            .map(|c| c.alpha.abs())
            .min_by(f64::total_cmp)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,wsr,ba\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.alpha, c.beta, c.wsr, c.ba));
        }
        out
    }
}

/// Evaluate the vicinity grid. For each `(alpha, beta)` the neighbor model is
/// built from the anchored directions, its BatchNorm statistics are
/// re-estimated on (at most 1024 samples of) `clean_data`, and WSR/BA are
/// recorded. The anchor model is never mutated.
pub fn scan(
    model: &ModelState,
    pair: &DirectionPair,
    grid: &GridSpec,
    clean_data: &LabeledDataset,
    clean_test: &LabeledDataset,
    wm_test: &LabeledDataset,
    target: usize,
) -> Result<LandscapeGrid> {
    grid.validate()?;
    let theta_norm = model.param_l2_norm();
    let bn_cap = clean_data.len().min(1024);
    let bn_indices: Vec<usize> = (0..bn_cap).collect();
    let bn_images = clean_data.images.gather0(&bn_indices);

    let mut coords = Vec::new();
    for alpha in grid.alphas() {
        for beta in grid.betas() {
            coords.push((alpha, beta));
        }
    }
    let checksum_before = model.param_checksum();
    let cells: Result<Vec<GridCell>> = coords
        .par_iter()
        .map(|&(alpha, beta)| {
            let mut neighbor = model
                .add_scaled(&pair.d_adv, alpha * theta_norm / pair.adv_norm)?
                .add_scaled(&pair.d_ft, beta * theta_norm / pair.ft_norm)?;
            bn_reestimate(&mut neighbor, &bn_images, 1)?;
            let ba = benign_accuracy(&neighbor, clean_test)?;
            let rate = wsr(&neighbor, wm_test, target)?;
            Ok(GridCell { alpha, beta, wsr: rate, ba })
        })
        .collect();
    let cells = cells?;
    if model.param_checksum() != checksum_before {
        return Err(Error::Numeric("scan mutated the anchor model".into()));
    }
    Ok(LandscapeGrid {
        spec: grid.clone(),
        cells,
        adv_norm: pair.adv_norm,
        ft_norm: pair.ft_norm,
        bn_samples: bn_cap,
    })
}

/// Penultimate-layer feature vectors (the flattened final feature map) for
/// clean and watermark samples, with labels and origin tags. Consumers run
/// their own projections.
pub struct EmbeddingTable {
    pub dim: usize,
    /// (tag, label, features); tag is "clean" or "watermark".
    pub rows: Vec<(&'static str, usize, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,label");
        for d in 0..self.dim {
            out.push_str(&format!(",f{d}"));
        }
        out.push('\n');
        for (tag, label, feats) in &self.rows {
            out.push_str(&format!("{tag},{label}"));
            for f in feats {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn export_embeddings(
    model: &ModelState,
    clean_data: &LabeledDataset,
    wm_data: &LabeledDataset,
) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(clean_data.len() + wm_data.len());
    let mut dim = 0;
    for (tag, ds) in [("clean", clean_data), ("watermark", wm_data)] {
        for (images, labels) in ds.batches(256) {
            let features = forward_features(model, &images)?;
            let n = features.extent0();
            let width: usize = features.shape()[1..].iter().product();
            dim = width;
            let data = features.data();
            for i in 0..n {
                rows.push((tag, labels[i], data[i * width..(i + 1) * width].to_vec()));
            }
        }
    }
    Ok(EmbeddingTable { dim, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{builtin_shapes, split_owner_attacker, SplitRole};
    use crate::nn::build_model;
    use crate::watermark::{watermark_testset, WatermarkKind, WatermarkSpec};

    fn fixture() -> (ModelState, LabeledDataset, LabeledDataset, LabeledDataset) {
        let mut rng = Rng::stream(91, "init");
        let model = build_model("tinycnn", (1, 16, 16), 5, &mut rng).unwrap();
        let pool = builtin_shapes(5, 300, 16, 90, SplitRole::OwnerTrain).unwrap();
        let (owner, attacker) = split_owner_attacker(&pool, 0.8, 90).unwrap();
        let test = builtin_shapes(5, 120, 16, 92, SplitRole::Test).unwrap();
        (model, owner, attacker, test)
    }

    fn wm_set(test: &LabeledDataset) -> LabeledDataset {
        let spec = WatermarkSpec {
            kind: WatermarkKind::Noise { amplitude: 0.25 },
            target_label: 0,
            seed: 5,
        };
        watermark_testset(test, &spec).unwrap()
    }

    #[test]
    fn adversarial_direction_is_deterministic_and_ascending() {
        let (model, _, _, test) = fixture();
        let wm = wm_set(&test);
        let mut labeled_target = wm.clone();
        for l in labeled_target.labels.iter_mut() {
            *l = 0;
        }
        let d1 = adversarial_direction(&model, &labeled_target).unwrap();
        let d2 = adversarial_direction(&model, &labeled_target).unwrap();
        assert_eq!(d1, d2);

        // first-order check: a small step along +d increases the loss
        let norm = d1.l2_norm();
        let step = 1e-4 * model.param_l2_norm() / norm;
        let moved = model.add_scaled(&d1, step).unwrap();
        let before = crate::nn::batch_loss(
            &model,
            &labeled_target.images,
            &labeled_target.labels,
            &BnMode::Eval,
        )
        .unwrap();
        let after = crate::nn::batch_loss(
            &moved,
            &labeled_target.images,
            &labeled_target.labels,
            &BnMode::Eval,
        )
        .unwrap();
        assert!(after > before, "loss {before} -> {after} did not increase");
    }

    #[test]
    fn adversarial_direction_matches_full_batch_gradient() {
        let (model, _, _, test) = fixture();
        let mut wm = wm_set(&test);
        for l in wm.labels.iter_mut() {
            *l = 0;
        }
        let d = adversarial_direction(&model, &wm).unwrap();
        let mut probe = model.clone();
        let (_, oracle) =
            loss_and_grad(&mut probe, &wm.images, &wm.labels, &BnMode::Eval).unwrap();
        assert_eq!(d, oracle);
    }

    #[test]
    fn finetune_direction_zero_iters_is_zero() {
        let (model, _, attacker, _) = fixture();
        let d = finetune_direction(&model, &attacker, 0, 0.05, 7).unwrap();
        assert_eq!(d.l2_norm(), 0.0);
    }

    #[test]
    fn finetune_direction_is_seed_deterministic_and_nonzero() {
        let (model, _, attacker, _) = fixture();
        let a = finetune_direction(&model, &attacker, 10, 0.05, 7).unwrap();
        let b = finetune_direction(&model, &attacker, 10, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let rel = a.l2_norm() / model.param_l2_norm();
        assert!(rel > 0.0, "relative displacement {rel}");
    }

    #[test]
    fn grid_axes_hit_origin_exactly() {
        let grid = GridSpec::default();
        assert!(grid.alphas().contains(&0.0));
        assert!(grid.betas().contains(&0.0));
        assert_eq!(grid.alphas().len(), 21);
    }

    #[test]
    fn scan_respects_relative_distance_and_purity() {
        let (model, owner, attacker, test) = fixture();
        let wm = wm_set(&test);
        let mut wm_target = wm.clone();
        for l in wm_target.labels.iter_mut() {
            *l = 0;
        }
        let pair = DirectionPair::new(
            adversarial_direction(&model, &wm_target).unwrap(),
            finetune_direction(&model, &attacker, 5, 0.05, 7).unwrap(),
        )
        .unwrap();
        let grid = GridSpec {
            alpha_min: -0.02,
            alpha_max: 0.02,
            beta_min: 0.0,
            beta_max: 0.0,
            step: 0.01,
        };
        let checksum = model.param_checksum();
        let result = scan(&model, &pair, &grid, &owner, &test, &wm, 0).unwrap();
        assert_eq!(model.param_checksum(), checksum);
        assert_eq!(result.cells.len(), 5);

        // relative-distance correctness at (alpha, 0)
        let theta_norm = model.param_l2_norm();
        for &alpha in &[-0.02, 0.01] {
            let neighbor = model
                .add_scaled(&pair.d_adv, alpha * theta_norm / pair.adv_norm)
                .unwrap();
            let base = model.flatten_params();
            let moved = neighbor.flatten_params();
            let dist = base
                .iter()
                .zip(&moved)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / theta_norm;
            assert!(
                (dist - alpha.abs()) <= 1e-9 * alpha.abs().max(1e-12),
                "alpha {alpha}: relative distance {dist}"
            );
        }
    }

    #[test]
    fn scan_cells_are_order_independent() {
        let (model, owner, attacker, test) = fixture();
        let wm = wm_set(&test);
        let mut wm_target = wm.clone();
        for l in wm_target.labels.iter_mut() {
            *l = 0;
        }
        let pair = DirectionPair::new(
            adversarial_direction(&model, &wm_target).unwrap(),
            finetune_direction(&model, &attacker, 5, 0.05, 7).unwrap(),
        )
        .unwrap();
        let grid = GridSpec {
            alpha_min: -0.01,
            alpha_max: 0.01,
            beta_min: -0.01,
            beta_max: 0.01,
            step: 0.01,
        };
        let a = scan(&model, &pair, &grid, &owner, &test, &wm, 0).unwrap();
        let b = scan(&model, &pair, &grid, &owner, &test, &wm, 0).unwrap();
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn embeddings_have_fixed_dimension_and_full_coverage() {
        let (model, _, _, test) = fixture();
        let wm = wm_set(&test);
        let table = export_embeddings(&model, &test, &wm).unwrap();
        assert_eq!(table.rows.len(), test.len() + wm.len());
        assert_eq!(table.dim, 16 * 4 * 4);
        assert!(table.rows.iter().all(|(_, _, f)| f.len() == table.dim));
        let again = export_embeddings(&model, &test, &wm).unwrap();
        assert_eq!(again.rows[0].2, table.rows[0].2);
    }
}
