//! Two-level feature-label memory construction.

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{l2_normalized, norm_f64, Bitmap, ImageRecord, Label, MemoryBank, PatchGrid};

/// Fraction of anomalous pixels at which a patch cell counts as anomalous.
pub const MASK_CELL_THRESHOLD: f64 = 0.5;

/// Pixel span `[start, end)` covered by cell `i` of `cells` along an axis of `len` pixels.
fn cell_span(i: usize, cells: usize, len: usize) -> (usize, usize) {
    let bound = |k: usize| (k * len + cells / 2) / cells;
    let start = bound(i).min(len.saturating_sub(1));
    let end = bound(i + 1).max(start + 1).min(len);
    (start, end)
}

/// Labels each patch cell anomalous when at least half of its pixel block is.
/// Output is row-major over the grid.
pub fn downsample_mask(mask: &Bitmap, grid: &PatchGrid) -> Result<Vec<bool>> {
    if mask.height() != grid.image_h {
        return Err(Error::dims("mask height", grid.image_h, mask.height()));
    }
    if mask.width() != grid.image_w {
        return Err(Error::dims("mask width", grid.image_w, mask.width()));
    }
    let mut cells = Vec::with_capacity(grid.patches());
    for r in 0..grid.grid_h {
        let (r0, r1) = cell_span(r, grid.grid_h, grid.image_h);
        for c in 0..grid.grid_w {
            let (c0, c1) = cell_span(c, grid.grid_w, grid.image_w);
            let ones = (r0..r1)
                .flat_map(|y| (c0..c1).map(move |x| (y, x)))
                .filter(|&(y, x)| mask.get(y, x))
                .count();
            let total = (r1 - r0) * (c1 - c0);
            cells.push(ones as f64 >= MASK_CELL_THRESHOLD * total as f64);
        }
    }
    Ok(cells)
}

/// Per-patch labels of a record, when they are known: the downsampled mask
/// if present, all-normal for a normal image without a mask, otherwise `None`.
pub fn patch_labels(record: &ImageRecord, grid: &PatchGrid) -> Result<Option<Vec<bool>>> {
    match (&record.mask, record.label) {
        (Some(mask), _) => downsample_mask(mask, grid).map(Some),
        (None, Label::Normal) => Ok(Some(vec![false; grid.patches()])),
        (None, Label::Anomalous) => Ok(None),
    }
}

/// Normalized mean patch features inside (anomalous) and outside (normal) a region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrototypes {
    pub mu_norm: Option<Vec<f64>>,
    pub mu_anom: Option<Vec<f64>>,
}

fn normalized_mean<'a>(
    features: impl Iterator<Item = &'a [f64]>,
    d: usize,
) -> Result<Option<Vec<f64>>> {
    let mut sum = vec![0.0f64; d];
    let mut n = 0usize;
    for f in features {
        for (s, &x) in sum.iter_mut().zip(f) {
            *s += x;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    let norm = norm_f64(&sum);
    if norm < 1e-12 {
        return Err(Error::DegeneratePrototype(norm));
    }
    Ok(Some(sum.into_iter().map(|x| x / norm).collect()))
}

/// Averages unit-norm patch features by label and re-normalizes each mean.
///
/// `features` holds `labels.len()` rows of width `d`.
pub fn region_prototypes(features: &[f64], d: usize, labels: &[bool]) -> Result<RegionPrototypes> {
    if features.len() != labels.len() * d {
        return Err(Error::dims(
            "patch features",
            labels.len() * d,
            features.len(),
        ));
    }
    let rows = || features.chunks_exact(d).zip(labels);
    Ok(RegionPrototypes {
        mu_anom: normalized_mean(rows().filter(|(_, &l)| l).map(|(f, _)| f), d)?,
        mu_norm: normalized_mean(rows().filter(|(_, &l)| !l).map(|(f, _)| f), d)?,
    })
}

/// Warning attached to a bank missing one label class at some level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BankWarning {
    SingleClass { level: &'static str, label: Label },
}

impl std::fmt::Display for BankWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BankWarning::SingleClass { level, label } => write!(
                f,
                "{level} memory holds only {label:?} entries; retrieval against it is uninformative"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltBank {
    pub bank: MemoryBank,
    pub warnings: Vec<BankWarning>,
}

struct ImageEntries {
    cls_key: Vec<f64>,
    label: Label,
    prototypes: Option<RegionPrototypes>,
}

fn image_entries(record: &ImageRecord, grid: &PatchGrid, d: usize) -> Result<ImageEntries> {
    record.validate(grid, d)?;
    let cls_key = l2_normalized(&record.cls_feature)
        .ok_or_else(|| Error::ZeroVector(format!("class feature of {:?}", record.id)))?;
    let prototypes = match patch_labels(record, grid)? {
        Some(labels) => {
            let mut feats = Vec::with_capacity(record.patch_features.len());
            for (u, f) in record.patch_features.chunks_exact(d).enumerate() {
                let n = l2_normalized(f)
                    .ok_or_else(|| Error::ZeroVector(format!("patch {u} of {:?}", record.id)))?;
                feats.extend(n);
            }
            Some(region_prototypes(&feats, d, &labels)?)
        }
        None => None,
    };
    Ok(ImageEntries {
        cls_key,
        label: record.label,
        prototypes,
    })
}

fn to_f32_rows(rows: &[Vec<f64>], d: usize) -> Array2<f32> {
    let data = rows.iter().flatten().map(|&x| x as f32).collect();
    Array2::from_shape_vec((rows.len(), d), data).expect("rows of width d")
}

/// Builds the image-level and patch-level memories from auxiliary records.
///
/// Image level: one class-token entry per image. Patch level: the normal
/// prototype of every image with at least one normal patch and the anomalous
/// prototype of every image whose downsampled mask is nonempty. Anomalous
/// images without masks contribute to the image level only.
pub fn build_bank(records: &[ImageRecord], grid: &PatchGrid) -> Result<BuiltBank> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("no records to build a memory bank from".into()))?;
    let d = first.cls_feature.len();

    let entries = records
        .par_iter()
        .map(|r| image_entries(r, grid, d))
        .collect::<Result<Vec<_>>>()?;

    let mut cls_keys = Vec::with_capacity(entries.len());
    let mut cls_values = Vec::with_capacity(entries.len());
    let mut pat_keys = Vec::new();
    let mut pat_values = Vec::new();
    for e in entries {
        cls_keys.push(e.cls_key);
        cls_values.push(e.label);
        if let Some(p) = e.prototypes {
            if let Some(k) = p.mu_norm {
                pat_keys.push(k);
                pat_values.push(Label::Normal);
            }
            if let Some(k) = p.mu_anom {
                pat_keys.push(k);
                pat_values.push(Label::Anomalous);
            }
        }
    }
    if pat_keys.is_empty() {
        return Err(Error::Empty(
            "no image yields patch-level entries (anomalous images need masks)".into(),
        ));
    }

    let mut warnings = Vec::new();
    for (level, values) in [("image-level", &cls_values), ("patch-level", &pat_values)] {
        let first = values[0];
        if values.iter().all(|&v| v == first) {
            warnings.push(BankWarning::SingleClass {
                level,
                label: first,
            });
        }
    }

    let bank = MemoryBank::new(
        to_f32_rows(&cls_keys, d),
        cls_values,
        to_f32_rows(&pat_keys, d),
        pat_values,
    )?;
    Ok(BuiltBank { bank, warnings })
}

/// Uniformly samples `n` patch-level entries without replacement; the
/// image-level memory is kept whole.
pub fn subsample_bank(bank: &MemoryBank, n: usize, seed: u64) -> Result<MemoryBank> {
    let total = bank.n_patch();
    if n == 0 || n > total {
        return Err(Error::OutOfRange(format!(
            "subsample size {n} outside 1..={total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, total, n).into_vec();
    let keys = bank.patch_keys().select(ndarray::Axis(0), &picked);
    let values = picked.iter().map(|&i| bank.patch_values()[i]).collect();
    Ok(bank.with_patch_memory(keys, values))
}
