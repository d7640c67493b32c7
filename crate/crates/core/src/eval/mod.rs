//! Image- and pixel-level detection metrics and the per-category report.

mod regions;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnomalyMap, Bitmap};

pub use regions::connected_components;

/// Integration cap on the false-positive rate for PRO.
pub const PRO_FPR_CAP: f64 = 0.3;
/// Number of quantile thresholds swept for PRO.
pub const PRO_THRESHOLDS: usize = 200;

trait Score: Copy {
    fn total(&self, other: &Self) -> Ordering;
    fn to_f64(self) -> f64;
}

impl Score for f64 {
    fn total(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Score for f32 {
    fn total(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

fn check_lengths(n_scores: usize, n_labels: usize) -> Result<()> {
    if n_scores != n_labels {
        return Err(Error::dims("labels", n_scores, n_labels));
    }
    Ok(())
}

fn check_finite<S: Score>(scores: &[S]) -> Result<()> {
    if scores.iter().any(|s| !s.to_f64().is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    Ok(())
}

/// Tie-corrected rank statistic over `(score, label)` pairs; sorts in place.
fn auroc_pairs<S: Score>(pairs: &mut [(S, bool)]) -> Result<f64> {
    let n_pos = pairs.iter().filter(|p| p.1).count() as u128;
    let n_neg = pairs.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    pairs.sort_unstable_by(|a, b| a.0.total(&b.0));
    // twice the count of correctly ordered pairs, ties counting one half
    let mut twice_correct: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < pairs.len() && pairs[j].0.total(&pairs[i].0) == Ordering::Equal {
            if pairs[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_correct += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_correct as f64 / (2 * n_pos * n_neg) as f64)
}

/// Area under the ROC curve; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_finite(scores)?;
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    auroc_pairs(&mut pairs)
}

/// Average precision: precision at each tied-score group boundary weighted
/// by the positives in that group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "AP needs at least one positive".into(),
        ));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            group_pos += usize::from(pairs[j].1);
            j += 1;
        }
        tp += group_pos;
        seen = j;
        if group_pos > 0 {
            ap += group_pos as f64 * tp as f64 / seen as f64;
        }
        i = j;
    }
    debug_assert_eq!(seen, pairs.len());
    Ok(ap / n_pos as f64)
}

fn check_maps(maps: &[AnomalyMap], masks: &[Bitmap]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::dims("masks", maps.len(), masks.len()));
    }
    for (m, k) in maps.iter().zip(masks) {
        if m.height() != k.height() || m.width() != k.width() {
            return Err(Error::dims("mask pixels", m.len(), k.height() * k.width()));
        }
    }
    Ok(())
}

/// AUROC over all pixels of all maps pooled together.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[Bitmap]) -> Result<f64> {
    check_maps(maps, masks)?;
    let mut pairs: Vec<(f32, bool)> = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
    for (m, k) in maps.iter().zip(masks) {
        check_finite(m.scores())?;
        pairs.extend(m.scores().iter().copied().zip(k.bits().iter().copied()));
    }
    auroc_pairs(&mut pairs)
}

/// Trapezoid area under a curve of `(x, y)` points with nondecreasing `x`,
/// from x = 0 to `cap`, interpolating linearly at the cap.
pub fn area_to_cap(points: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y_cap) / 2.0;
            break;
        }
    }
    area
}

/// Indices of `thresholds` evenly spaced order statistics of `n` sorted values.
fn quantile_indices(n: usize, thresholds: usize) -> Vec<usize> {
    if thresholds <= 1 || n == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..thresholds)
        .map(|k| ((k as f64) * (n - 1) as f64 / (thresholds - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// Per-region overlap integrated over false-positive rate up to `fpr_cap`,
/// normalized to [0, 1].
///
/// Regions are the 8-connected components of each mask. For each of
/// `thresholds` score quantiles (descending) the curve records the mean
/// covered fraction over all regions against the pooled FPR; the curve
/// starts at the origin.
pub fn pro(maps: &[AnomalyMap], masks: &[Bitmap], fpr_cap: f64, thresholds: usize) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "PRO FPR cap {fpr_cap} outside (0, 1]"
        )));
    }
    if thresholds == 0 {
        return Err(Error::OutOfRange("PRO needs at least one threshold".into()));
    }
    check_maps(maps, masks)?;

    // each pixel: score and its weight in the overlap sum (0 for normal pixels)
    let mut pixels: Vec<(f32, Option<f64>)> = Vec::new();
    let mut n_regions = 0usize;
    for (m, k) in maps.iter().zip(masks) {
        check_finite(m.scores())?;
        let (labels, sizes) = connected_components(k);
        for (&s, l) in m.scores().iter().zip(&labels) {
            pixels.push((s, l.map(|id| 1.0 / sizes[id as usize] as f64)));
        }
        n_regions += sizes.len();
    }
    if n_regions == 0 {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous region".into(),
        ));
    }
    let n_normal = pixels.iter().filter(|p| p.1.is_none()).count();
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("PRO needs normal pixels".into()));
    }

    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    // cumulative (false positives, overlap sum) over the descending order
    let mut cum = Vec::with_capacity(pixels.len());
    let (mut fp, mut overlap) = (0usize, 0.0f64);
    for p in &pixels {
        match p.1 {
            Some(w) => overlap += w,
            None => fp += 1,
        }
        cum.push((fp, overlap));
    }

    let ascending: Vec<f32> = pixels.iter().rev().map(|p| p.0).collect();
    let mut points = vec![(0.0, 0.0)];
    for &qi in quantile_indices(ascending.len(), thresholds).iter().rev() {
        let t = ascending[qi];
        // pixels with score >= t form a prefix of the descending order
        let count = pixels.partition_point(|p| p.0 >= t);
        let (fp, overlap) = cum[count - 1];
        points.push((fp as f64 / n_normal as f64, overlap / n_regions as f64));
    }
    Ok(area_to_cap(&points, fpr_cap) / fpr_cap)
}

/// Metrics of one category; a metric is absent when undefined for its data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub images: usize,
    pub anomalous_images: usize,
    pub pixel_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAverages {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub pro_fpr_cap: f64,
    pub pro_thresholds: usize,
    pub pro_connectivity: u8,
    pub category_averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub averages: MetricAverages,
    pub categories: usize,
    pub images: usize,
    pub metadata: ReportMetadata,
}

/// One scored image joined with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub category: String,
    pub anomalous: bool,
    pub score: f64,
    pub map: AnomalyMap,
    /// Pixel ground truth; `None` excludes the image from pixel metrics.
    pub mask: Option<Bitmap>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-category metrics and their unweighted means across categories.
pub fn evaluate(items: &[EvalItem]) -> Result<EvalReport> {
    let mut by_category: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
    for it in items {
        by_category.entry(&it.category).or_default().push(it);
    }
    let mut per_category = BTreeMap::new();
    for (cat, its) in by_category {
        let scores: Vec<f64> = its.iter().map(|i| i.score).collect();
        let labels: Vec<bool> = its.iter().map(|i| i.anomalous).collect();
        let (maps, masks): (Vec<AnomalyMap>, Vec<Bitmap>) = its
            .iter()
            .filter_map(|i| i.mask.as_ref().map(|m| (i.map.clone(), m.clone())))
            .unzip();
        let has_pixels = !maps.is_empty();
        per_category.insert(
            cat.to_string(),
            CategoryMetrics {
                image_auroc: defined(auroc(&scores, &labels))?,
                image_ap: defined(average_precision(&scores, &labels))?,
                pixel_auroc: if has_pixels {
                    defined(pixel_auroc(&maps, &masks))?
                } else {
                    None
                },
                pro: if has_pixels {
                    defined(pro(&maps, &masks, PRO_FPR_CAP, PRO_THRESHOLDS))?
                } else {
                    None
                },
                images: its.len(),
                anomalous_images: labels.iter().filter(|&&l| l).count(),
                pixel_images: maps.len(),
            },
        );
    }
    let averages = MetricAverages {
        image_auroc: mean_of(
            per_category
                .values()
                .map(|m: &CategoryMetrics| m.image_auroc),
        ),
        image_ap: mean_of(per_category.values().map(|m| m.image_ap)),
        pixel_auroc: mean_of(per_category.values().map(|m| m.pixel_auroc)),
        pro: mean_of(per_category.values().map(|m| m.pro)),
    };
    Ok(EvalReport {
        schema_version: 1,
        categories: per_category.len(),
        per_category,
        averages,
        images: items.len(),
        metadata: ReportMetadata {
            pro_fpr_cap: PRO_FPR_CAP,
            pro_thresholds: PRO_THRESHOLDS,
            pro_connectivity: 8,
            category_averaging: "unweighted mean over categories".into(),
        },
    })
}

impl EvalReport {
    /// Table with the usual pairings, values in percent.
    pub fn to_csv(&self) -> String {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::from("category,P-AUROC / PRO,I-AUROC / I-AP\n");
        let mut row =
            |name: &str, pa: Option<f64>, pr: Option<f64>, ia: Option<f64>, ap: Option<f64>| {
                out.push_str(&format!(
                    "{name},{} / {},{} / {}\n",
                    pct(pa),
                    pct(pr),
                    pct(ia),
                    pct(ap)
                ));
            };
        for (cat, m) in &self.per_category {
            row(cat, m.pixel_auroc, m.pro, m.image_auroc, m.image_ap);
        }
        let a = &self.averages;
        row("mean", a.pixel_auroc, a.pro, a.image_auroc, a.image_ap);
        out
    }
}
