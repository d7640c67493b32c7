//! Synthetic feature packs for demos and property tests.
//!
//! Every category has its own center on the unit sphere, orthogonal to the
//! shared anomaly direction; anomalous patches
//! (and anomalous class tokens) are shifted along an anomaly direction shared
//! by all categories, perturbed slightly per category. Auxiliary and target
//! splits draw disjoint categories, so detection on the target split has to
//! transfer through the shared direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::pack::FeaturePack;
use crate::types::{Bitmap, ImageRecord, Label, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub d: usize,
    pub grid_side: usize,
    pub patch_px: usize,
    pub aux_categories: usize,
    pub target_categories: usize,
    pub images_per_category: usize,
    /// Probability that an image is anomalous.
    pub anomaly_rate: f64,
    /// Norm of the isotropic patch noise.
    pub noise: f64,
    /// Length of the anomalous shift before normalization.
    pub anomaly_strength: f64,
    /// Norm of the per-category perturbation of the anomaly direction.
    pub direction_jitter: f64,
    /// Largest defect side, in patches.
    pub max_defect: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 16,
            grid_side: 8,
            patch_px: 4,
            aux_categories: 6,
            target_categories: 3,
            images_per_category: 16,
            anomaly_rate: 0.5,
            noise: 0.35,
            anomaly_strength: 1.5,
            direction_jitter: 0.3,
            max_defect: 3,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> PatchGrid {
        let side = self.grid_side * self.patch_px;
        PatchGrid::new(self.grid_side, self.grid_side, side, side).expect("positive synthetic grid")
    }
}

/// Auxiliary split (for the memory bank and training) and target split (for
/// evaluation), plus each target image's category.
#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub aux: FeaturePack,
    pub target: FeaturePack,
    pub target_categories: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit(gaussian(rng, d, 1.0))
}

/// Random unit vector orthogonal to `axis` (itself unit-norm).
fn orthogonal_unit(rng: &mut ChaCha8Rng, axis: &[f64]) -> Vec<f64> {
    let v = gaussian(rng, axis.len(), 1.0);
    let along: f64 = v.iter().zip(axis).map(|(x, a)| x * a).sum();
    unit(axpy(-along, axis, &v))
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

struct Category {
    name: String,
    center: Vec<f64>,
    direction: Vec<f64>,
}

fn make_image(rng: &mut ChaCha8Rng, cfg: &SynthConfig, cat: &Category, id: String) -> ImageRecord {
    let grid = cfg.grid();
    let anomalous = rng.random_bool(cfg.anomaly_rate);
    let (mut r0, mut c0, mut rh, mut cw) = (0, 0, 0, 0);
    if anomalous {
        let max = cfg.max_defect.clamp(1, cfg.grid_side);
        rh = rng.random_range(1..=max);
        cw = rng.random_range(1..=max);
        r0 = rng.random_range(0..=cfg.grid_side - rh);
        c0 = rng.random_range(0..=cfg.grid_side - cw);
    }
    let in_defect =
        |r: usize, c: usize| anomalous && (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c);

    let mut patches = Vec::with_capacity(grid.patches() * cfg.d);
    for r in 0..cfg.grid_side {
        for c in 0..cfg.grid_side {
            let mut f = axpy(1.0, &cat.center, &gaussian(rng, cfg.d, cfg.noise));
            if in_defect(r, c) {
                f = axpy(cfg.anomaly_strength, &cat.direction, &f);
            }
            patches.extend(f.into_iter().map(|x| x as f32));
        }
    }
    let mut cls = axpy(1.0, &cat.center, &gaussian(rng, cfg.d, cfg.noise));
    if anomalous {
        cls = axpy(cfg.anomaly_strength, &cat.direction, &cls);
    }
    let p = cfg.patch_px;
    let mask = anomalous
        .then(|| Bitmap::from_fn(grid.image_h, grid.image_w, |y, x| in_defect(y / p, x / p)));
    let mask = mask.or_else(|| {
        rng.random_bool(0.5)
            .then(|| Bitmap::zeros(grid.image_h, grid.image_w))
    });
    ImageRecord {
        id,
        label: Label::from_anomalous(anomalous),
        cls_feature: cls.into_iter().map(|x| x as f32).collect(),
        patch_features: patches,
        mask,
    }
}

/// Draws auxiliary and target splits from one seeded world.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthSplits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = random_unit(&mut rng, cfg.d);
    let mut categories: Vec<Category> = (0..cfg.aux_categories + cfg.target_categories)
        .map(|k| Category {
            name: format!("cat{k}"),
            center: orthogonal_unit(&mut rng, &shared),
            direction: unit(axpy(
                1.0,
                &shared,
                &gaussian(&mut rng, cfg.d, cfg.direction_jitter),
            )),
        })
        .collect();
    let target_cats = categories.split_off(cfg.aux_categories);

    let mut images = |cats: &[Category], split: &str| {
        let mut recs = Vec::new();
        let mut names = Vec::new();
        for cat in cats {
            for i in 0..cfg.images_per_category {
                let id = format!("{split}/{}/{i:03}", cat.name);
                recs.push(make_image(&mut rng, cfg, cat, id));
                names.push(cat.name.clone());
            }
        }
        (recs, names)
    };
    let (aux, _) = images(&categories, "aux");
    let (target, target_categories) = images(&target_cats, "target");
    let grid = cfg.grid();
    Ok(SynthSplits {
        aux: FeaturePack::new(grid, cfg.d, aux)?,
        target: FeaturePack::new(grid, cfg.d, target)?,
        target_categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg, 5).unwrap();
        let b = generate(&cfg, 5).unwrap();
        assert_eq!(a.aux, b.aux);
        assert_eq!(
            a.target.records.len(),
            cfg.target_categories * cfg.images_per_category
        );
        for r in a.aux.records.iter().chain(&a.target.records) {
            r.validate(&a.aux.grid, cfg.d).unwrap();
            if let Some(m) = &r.mask {
                assert_eq!(m.any(), r.label.is_anomalous());
            }
            if r.label.is_anomalous() {
                assert!(r.mask.is_some());
            }
        }
    }
}
