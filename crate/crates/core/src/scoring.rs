//! Pixel anomaly maps and image-level scores from retrieval outputs.

use crate::error::{Error, Result};
use crate::retrieval::{RetrievalOutput, Retriever};
use crate::types::{AnomalyMap, ImageRecord, PatchGrid, RetrievalParams};

/// Source coordinate and blend weight for target index `i` under cell-center
/// alignment: sample `s` sits at `(s + 0.5) · target / source − 0.5`.
fn source_coord(i: usize, source: usize, target: usize) -> (usize, usize, f64) {
    let pos = (i as f64 + 0.5) * source as f64 / target as f64 - 0.5;
    let pos = pos.clamp(0.0, (source - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(source - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear upsampling of a `grid_h × grid_w` score grid (row-major) to the
/// target size, treating grid values as samples at cell centers.
pub fn upsample_map(
    grid_scores: &[f64],
    grid_h: usize,
    grid_w: usize,
    target_h: usize,
    target_w: usize,
) -> Result<AnomalyMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::OutOfRange(
            "upsampling target must be non-empty".into(),
        ));
    }
    if grid_h == 0 || grid_w == 0 || grid_scores.len() != grid_h * grid_w {
        return Err(Error::dims(
            "score grid",
            grid_h * grid_w,
            grid_scores.len(),
        ));
    }
    let (lo, hi) = grid_scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let cols: Vec<_> = (0..target_w)
        .map(|x| source_coord(x, grid_w, target_w))
        .collect();
    let mut out = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let (r0, r1, wy) = source_coord(y, grid_h, target_h);
        let row0 = &grid_scores[r0 * grid_w..(r0 + 1) * grid_w];
        let row1 = &grid_scores[r1 * grid_w..(r1 + 1) * grid_w];
        for &(c0, c1, wx) in &cols {
            let top = row0[c0] * (1.0 - wx) + row0[c1] * wx;
            let bottom = row1[c0] * (1.0 - wx) + row1[c1] * wx;
            let v = top * (1.0 - wy) + bottom * wy;
            out.push(v.clamp(lo, hi) as f32);
        }
    }
    AnomalyMap::new(target_h, target_w, out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` returns the map unchanged.
pub fn gaussian_smooth(map: &AnomalyMap, sigma: f64) -> AnomalyMap {
    if sigma.is_nan() || sigma <= 0.0 {
        return map.clone();
    }
    let (h, w) = (map.height(), map.width());
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let src = map.scores();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    k * f64::from(src[y * w + clamp(x as isize + t as isize - radius, w)])
                })
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(y as isize + t as isize - radius, h) * w + x])
                .sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    AnomalyMap::new(h, w, out).expect("same shape")
}

/// Full-resolution anomaly map from a retrieval output.
pub fn anomaly_map(
    output: &RetrievalOutput,
    grid: &PatchGrid,
    smooth_sigma: f64,
) -> Result<AnomalyMap> {
    let map = upsample_map(
        &output.patch_anomaly(),
        grid.grid_h,
        grid.grid_w,
        grid.image_h,
        grid.image_w,
    )?;
    Ok(gaussian_smooth(&map, smooth_sigma))
}

/// `max(1, round(fraction · pixels))`.
pub fn topk_count(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64).round() as usize).clamp(1, pixels.max(1))
}

/// Mean of the `k` largest map values.
pub fn topk_mean(map: &AnomalyMap, k: usize) -> Result<f64> {
    let n = map.len();
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!("top-k {k} outside 1..={n}")));
    }
    let mut v: Vec<f32> = map.scores().to_vec();
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let mut top: Vec<f64> = v[..k].iter().map(|&x| f64::from(x)).collect();
    // fixed order so the sum does not depend on the selection's permutation
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(top.iter().sum::<f64>() / k as f64)
}

/// Image score: anomaly channel of the class-token retrieval plus the top-k
/// mean of the pixel map.
pub fn image_score(y_cls: [f64; 2], map: &AnomalyMap, params: &RetrievalParams) -> Result<f64> {
    Ok(y_cls[1] + image_score_pixel_only(map, params)?)
}

/// Top-k pooling of the pixel map alone.
pub fn image_score_pixel_only(map: &AnomalyMap, params: &RetrievalParams) -> Result<f64> {
    topk_mean(map, topk_count(params.topk_fraction, map.len()))
}

/// Score and map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub score: f64,
    pub y_cls: [f64; 2],
    pub map: AnomalyMap,
}

/// How retrieval outputs are turned into maps and image scores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreOptions {
    /// Gaussian blur of the pixel map; off when zero.
    pub smooth_sigma: f64,
    /// Drop the image-level term and score by top-k pooling alone.
    pub pixel_only: bool,
}

/// Retrieves one image and aggregates it into a pixel map and an image score.
pub fn score_image(
    retriever: &Retriever,
    record: &ImageRecord,
    grid: &PatchGrid,
    options: &ScoreOptions,
) -> Result<ScoredImage> {
    let out = retriever.retrieve(record)?;
    if out.y_seg.len() != grid.patches() {
        return Err(Error::dims(
            format!("patches of {:?}", record.id),
            grid.patches(),
            out.y_seg.len(),
        ));
    }
    let map = anomaly_map(&out, grid, options.smooth_sigma)?;
    let params = retriever.params();
    let score = if options.pixel_only {
        image_score_pixel_only(&map, params)?
    } else {
        image_score(out.y_cls, &map, params)?
    };
    Ok(ScoredImage {
        score,
        y_cls: out.y_cls,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let m = upsample_map(&[0.4; 6], 2, 3, 7, 5).unwrap();
        assert!(m.scores().iter().all(|&v| v == 0.4f32));
        let m = upsample_map(&[0.9], 1, 1, 3, 4).unwrap();
        assert!(m.scores().iter().all(|&v| v == 0.9f32));
    }

    #[test]
    fn two_by_two_profile() {
        let m = upsample_map(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4).unwrap();
        for r in 0..4 {
            let row: Vec<f32> = (0..4).map(|c| m.get(r, c)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(upsample_map(&[0.1], 1, 1, 0, 3).is_err());
    }

    #[test]
    fn topk_cases() {
        let m = AnomalyMap::new(2, 2, vec![0.9, 0.5, 0.1, 0.3]).unwrap();
        assert!((topk_mean(&m, 2).unwrap() - 0.7).abs() < 1e-7);
        assert_eq!(topk_mean(&m, 1).unwrap(), f64::from(0.9f32));
        let all = topk_mean(&m, 4).unwrap();
        let mean = [0.9f32, 0.5, 0.1, 0.3]
            .iter()
            .map(|&x| f64::from(x))
            .sum::<f64>()
            / 4.0;
        assert!((all - mean).abs() < 1e-15);
        assert!(topk_mean(&m, 0).is_err());
        assert!(topk_mean(&m, 5).is_err());
    }

    #[test]
    fn topk_count_rounding() {
        assert_eq!(topk_count(0.01, 10), 1);
        assert_eq!(topk_count(0.01, 518 * 518), 2683);
        assert_eq!(topk_count(1.0, 16), 16);
    }

    #[test]
    fn image_score_cases() {
        let p = RetrievalParams::default();
        let zeros = AnomalyMap::filled(10, 10, 0.0);
        let ones = AnomalyMap::filled(10, 10, 1.0);
        assert_eq!(image_score([1.0, 0.0], &zeros, &p).unwrap(), 0.0);
        assert_eq!(image_score([0.0, 1.0], &ones, &p).unwrap(), 2.0);
        let quarter = AnomalyMap::filled(10, 10, 0.25);
        assert!((image_score([0.6, 0.4], &quarter, &p).unwrap() - 0.65).abs() < 1e-12);
    }

    #[test]
    fn pixel_only_cases() {
        let p = RetrievalParams::default();
        assert_eq!(
            image_score_pixel_only(&AnomalyMap::filled(4, 4, 0.0), &p).unwrap(),
            0.0
        );
        let mut v = vec![0.0f32; 16];
        v[5] = 1.0;
        assert_eq!(
            image_score_pixel_only(&AnomalyMap::new(4, 4, v).unwrap(), &p).unwrap(),
            1.0
        );
        let u = image_score_pixel_only(&AnomalyMap::filled(4, 4, 0.3), &p).unwrap();
        assert_eq!(u, f64::from(0.3f32));
    }

    #[test]
    fn smoothing_keeps_constants_and_is_off_by_default() {
        let m = AnomalyMap::filled(6, 6, 0.5);
        let s = gaussian_smooth(&m, 1.5);
        assert!(s.scores().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let mut v = vec![0.0f32; 36];
        v[14] = 1.0;
        let spike = AnomalyMap::new(6, 6, v).unwrap();
        assert_eq!(gaussian_smooth(&spike, 0.0), spike);
        let blurred = gaussian_smooth(&spike, 1.0);
        assert!(blurred.get(2, 2) < 1.0 && blurred.get(2, 3) > 0.0);
    }
}
