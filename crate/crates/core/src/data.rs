//! Datasets: the built-in procedural shapes set, IDX binary loaders, and the
//! owner/attacker split.
//!
//! The shapes dataset draws K classes of parametric glyphs (filled square,
//! disk, cross, ring, diagonal X) with jittered position, size, and
//! intensity over a noisy background, so experiments run with zero
//! downloads. IDX files follow the classic raw layout: big-endian magic
//! `0x00000803` (images, u8) or `0x00000801` (labels, u8).

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which split a dataset belongs to. Attacks assert their inputs carry the
/// attacker-holdout tag, so owner training data can never leak into them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    OwnerTrain,
    AttackerHoldout,
    Test,
}

/// Images in (N, C, H, W) layout with values in [0, 1] plus class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub role: SplitRole,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, role: SplitRole) -> Result<Self> {
        if images.extent0() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.extent0(),
                labels.len()
            )));
        }
        if images.extent0() == 0 {
            return Err(Error::Argument("dataset must not be empty".into()));
        }
        Ok(LabeledDataset { images, labels, role })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset at the given indices, keeping the role tag.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather0(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            role: self.role,
        }
    }

    /// Sequential batches of at most `batch` samples.
    pub fn batches(&self, batch: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch)).map(move |b| {
            let lo = b * batch;
            let hi = ((b + 1) * batch).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            (self.images.gather0(&idx), self.labels[lo..hi].to_vec())
        })
    }
}

/// Deterministic split of a training pool into owner and attacker parts.
/// Index selection derives from the seed alone.
pub fn split_owner_attacker(
    pool: &LabeledDataset,
    owner_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&owner_fraction) || owner_fraction == 0.0 {
        return Err(Error::Config(format!(
            "owner fraction must be in (0, 1), got {owner_fraction}"
        )));
    }
    let n = pool.len();
    let owner_n = ((n as f64) * owner_fraction).round() as usize;
    if owner_n == 0 || owner_n == n {
        return Err(Error::Config(format!(
            "owner fraction {owner_fraction} empties one side of a {n}-sample pool"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::stream(seed, "owner-attacker-split");
    rng.shuffle(&mut indices);
    let mut owner = pool.subset(&indices[..owner_n]);
    owner.role = SplitRole::OwnerTrain;
    let mut attacker = pool.subset(&indices[owner_n..]);
    attacker.role = SplitRole::AttackerHoldout;
    Ok((owner, attacker))
}

const SHAPE_KINDS: usize = 5;

/// Render one shape-class glyph into a size x size single-channel image.
/// Jitter and noise are deliberately heavy: the classification task must not
/// saturate, or fine-tuning stops producing parameter drift.
fn render_shape(class: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; size * size];
    for v in img.iter_mut() {
        *v = rng.uniform() * 0.15;
    }
    let half = size as f64 / 2.0;
    let cy = half + (rng.uniform() - 0.5) * 7.0;
    let cx = half + (rng.uniform() - 0.5) * 7.0;
    let r = size as f64 * (0.13 + rng.uniform() * 0.17);
    let intensity = 0.45 + rng.uniform() * 0.55;
    for yi in 0..size {
        for xi in 0..size {
            let dy = yi as f64 - cy;
            let dx = xi as f64 - cx;
            let on = match class % SHAPE_KINDS {
                // filled square
                0 => dy.abs() <= r && dx.abs() <= r,
                // disk
                1 => dy * dy + dx * dx <= r * r,
                // cross
                2 => {
                    (dy.abs() <= r * 0.4 && dx.abs() <= r * 1.4)
                        || (dx.abs() <= r * 0.4 && dy.abs() <= r * 1.4)
                }
                // ring
                3 => {
                    let d2 = dy * dy + dx * dx;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
                // diagonal X
                _ => {
                    ((dy - dx).abs() <= r * 0.45 || (dy + dx).abs() <= r * 0.45)
                        && dy.abs() <= r * 1.2
                        && dx.abs() <= r * 1.2
                }
            };
            if on {
                img[yi * size + xi] = intensity;
            }
        }
    }
    // pixel noise keeps the task from saturating
    for v in img.iter_mut() {
        *v = (*v + (rng.uniform() - 0.5) * 0.12).clamp(0.0, 1.0);
    }
    img
}

/// Built-in procedural shapes dataset: `n` class-balanced samples of
/// `classes` shape kinds on size x size single-channel images.
pub fn builtin_shapes(
    classes: usize,
    n: usize,
    size: usize,
    seed: u64,
    role: SplitRole,
) -> Result<LabeledDataset> {
    if classes < 2 || classes > SHAPE_KINDS {
        return Err(Error::Config(format!(
            "builtin dataset supports 2..={SHAPE_KINDS} classes, got {classes}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("builtin dataset size must be positive".into()));
    }
    let mut rng = Rng::stream(seed, "builtin-shapes");
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * size * size);
    for &label in &labels {
        data.extend(render_shape(label, size, &mut rng));
    }
    LabeledDataset::new(Tensor::new(vec![n, 1, size, size], data), labels, role)
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file: magic `0x00000803`, dims (N, H, W), u8 pixels.
/// Pixels scale to [0, 1]; the result is (N, 1, H, W).
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != 0x0000_0803 {
        return Err(Error::Integrity(format!(
            "{}: bad IDX image magic {magic:#010x} (expected 0x00000803)",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f)? as usize;
    let h = read_u32_be(&mut f)? as usize;
    let w = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n * h * w];
    f.read_exact(&mut raw)
        .map_err(|_| Error::Integrity(format!("{}: truncated IDX pixel data", path.display())))?;
    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data))
}

/// Load an IDX label file: magic `0x00000801`, u8 labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != 0x0000_0801 {
        return Err(Error::Integrity(format!(
            "{}: bad IDX label magic {magic:#010x} (expected 0x00000801)",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n];
    f.read_exact(&mut raw)
        .map_err(|_| Error::Integrity(format!("{}: truncated IDX label data", path.display())))?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

/// Write images out in IDX format.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let (n, c, h, w) = images.dims4();
    if c != 1 {
        return Err(Error::Argument("IDX image files are single-channel".into()));
    }
    let mut bytes = Vec::with_capacity(16 + n * h * w);
    bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in images.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::Argument(format!("label {l} exceeds the u8 IDX range")));
        }
        bytes.push(l as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load every IDX image file directly inside a directory, concatenated in
/// file-name order. Used both as the unrelated-image watermark source and as
/// a dataset backend (one subdirectory per class).
pub fn load_image_dir_flat(dir: &Path) -> Result<Tensor> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut parts = Vec::new();
    for path in names {
        parts.push(load_idx_images(&path)?);
    }
    if parts.is_empty() {
        return Err(Error::Config(format!("{}: no IDX image files found", dir.display())));
    }
    let mut out = parts.remove(0);
    for p in parts {
        out = Tensor::concat0(&out, &p);
    }
    Ok(out)
}

/// Load a directory-per-class dataset: each subdirectory of `root` (sorted
/// by name, index = class) holds IDX image files of that class.
pub fn load_image_dir_dataset(root: &Path, role: SplitRole) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!(
            "{}: expected one subdirectory per class",
            root.display()
        )));
    }
    let mut images: Option<Tensor> = None;
    let mut labels = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let part = load_image_dir_flat(dir)?;
        labels.extend(std::iter::repeat(class).take(part.extent0()));
        images = Some(match images {
            None => part,
            Some(prev) => Tensor::concat0(&prev, &part),
        });
    }
    LabeledDataset::new(images.unwrap(), labels, role)
}
