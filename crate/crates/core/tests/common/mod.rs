#![allow(dead_code)]

use mrad_core::{Bitmap, HeadWeights, ImageRecord, Label, MemoryBank, MetricWeights, PatchGrid};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    let mut a = Array2::zeros((n, d));
    for mut row in a.rows_mut() {
        let v = gaussian(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (x, y) in row.iter_mut().zip(v) {
            *x = (y / norm) as f32;
        }
    }
    a
}

/// Random bank with both labels present at each level.
pub fn random_bank(rng: &mut ChaCha8Rng, d: usize, n_cls: usize, n_patch: usize) -> MemoryBank {
    let labels = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Label> {
        (0..n)
            .map(|i| Label::from_anomalous(i == 0 || (i > 1 && rng.random_bool(0.5))))
            .collect()
    };
    let ck = unit_rows(rng, n_cls, d);
    let cv = labels(rng, n_cls);
    let pk = unit_rows(rng, n_patch, d);
    let pv = labels(rng, n_patch);
    MemoryBank::new(ck, cv, pk, pv).unwrap()
}

/// Rectangle mask in pixel space aligned to whole patches.
pub fn block_mask(grid: &PatchGrid, r0: usize, c0: usize, rows: usize, cols: usize) -> Bitmap {
    let (ph, pw) = (grid.image_h / grid.grid_h, grid.image_w / grid.grid_w);
    Bitmap::from_fn(grid.image_h, grid.image_w, |y, x| {
        (r0..r0 + rows).contains(&(y / ph)) && (c0..c0 + cols).contains(&(x / pw))
    })
}

/// Record with random features; anomalous records get a random block mask
/// unless `masked` is false.
pub fn random_record(
    rng: &mut ChaCha8Rng,
    id: &str,
    grid: &PatchGrid,
    d: usize,
    anomalous: bool,
    masked: bool,
) -> ImageRecord {
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    let mask = match (anomalous, masked) {
        (true, true) => {
            let (rows, cols) = (
                rng.random_range(1..=grid.grid_h),
                rng.random_range(1..=grid.grid_w),
            );
            let (r0, c0) = (
                rng.random_range(0..=grid.grid_h - rows),
                rng.random_range(0..=grid.grid_w - cols),
            );
            Some(block_mask(grid, r0, c0, rows, cols))
        }
        (false, true) => Some(Bitmap::zeros(grid.image_h, grid.image_w)),
        (_, false) => None,
    };
    ImageRecord {
        id: id.to_string(),
        label: Label::from_anomalous(anomalous),
        cls_feature: to_f32(gaussian(rng, d)),
        patch_features: to_f32(gaussian(rng, grid.patches() * d)),
        mask,
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> MetricWeights {
    let mut m = || {
        let noise = gaussian(rng, d * d);
        Array2::from_shape_fn((d, d), |(i, j)| {
            f64::from(u8::from(i == j)) + spread * noise[i * d + j]
        })
    };
    let mut head = || HeadWeights {
        query: m(),
        key: m(),
    };
    MetricWeights {
        cls: head(),
        seg: head(),
    }
}
