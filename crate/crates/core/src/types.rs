//! Shared domain types.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the ℓ2 norm of stored keys.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Normalizes `v` to unit ℓ2 norm, accumulating in f64.
///
/// Returns `None` for the zero vector or when any component is non-finite.
pub fn l2_normalized(v: &[f32]) -> Option<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| f64::from(x) / norm).collect())
}

pub(crate) fn norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Binary image or patch label, stored in memory as the one-hot pair
/// `[normal, anomalous]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_anomalous(anomalous: bool) -> Self {
        if anomalous {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Normal => [1.0, 0.0],
            Label::Anomalous => [0.0, 1.0],
        }
    }

    /// Inverse of [`Label::one_hot`]; anything but an exact one-hot pair is rejected.
    pub fn from_one_hot(row: [f32; 2]) -> Option<Self> {
        match row {
            [1.0, 0.0] => Some(Label::Normal),
            [0.0, 1.0] => Some(Label::Anomalous),
            _ => None,
        }
    }
}

/// Patch-token grid laid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl PatchGrid {
    pub fn new(grid_h: usize, grid_w: usize, image_h: usize, image_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || image_h == 0 || image_w == 0 {
            return Err(Error::OutOfRange(format!(
                "patch grid {grid_h}x{grid_w} over image {image_h}x{image_w} must be positive"
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            image_h,
            image_w,
        })
    }

    /// Square image tiled by square patches, e.g. 518 px with 14 px patches gives 37×37.
    pub fn from_patch_size(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 {
            return Err(Error::OutOfRange("patch size must be positive".into()));
        }
        let g = image_side / patch_side;
        Self::new(g, g, image_side, image_side)
    }

    /// Number of patch tokens per image.
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w
    }
}

/// Row-major binary bitmap (`true` = anomalous pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dims("bitmap", height * width, bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One image: identity, label, class-token feature, patch tokens (row-major
/// grid order, flattened `u × d`) and an optional pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub label: Label,
    pub cls_feature: Vec<f32>,
    pub patch_features: Vec<f32>,
    pub mask: Option<Bitmap>,
}

impl ImageRecord {
    pub fn patch(&self, index: usize, d: usize) -> &[f32] {
        &self.patch_features[index * d..(index + 1) * d]
    }

    pub fn patch_count(&self, d: usize) -> usize {
        self.patch_features.len().checked_div(d).unwrap_or(0)
    }

    /// Checks the record against a pack's grid and feature dimension.
    pub fn validate(&self, grid: &PatchGrid, d: usize) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.cls_feature.len() != d {
            return Err(Error::dims(
                format!("class feature of {:?}", self.id),
                d,
                self.cls_feature.len(),
            ));
        }
        let expected = grid.patches() * d;
        if self.patch_features.len() != expected {
            return Err(Error::dims(
                format!("patch features of {:?}", self.id),
                expected,
                self.patch_features.len(),
            ));
        }
        if self
            .cls_feature
            .iter()
            .chain(&self.patch_features)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite(format!("features of {:?}", self.id)));
        }
        if let Some(mask) = &self.mask {
            if mask.height() != grid.image_h || mask.width() != grid.image_w {
                return Err(invalid(format!(
                    "mask is {}x{}, image is {}x{}",
                    mask.height(),
                    mask.width(),
                    grid.image_h,
                    grid.image_w
                )));
            }
            if mask.any() && self.label == Label::Normal {
                return Err(invalid("normal label with a nonempty mask".into()));
            }
        }
        Ok(())
    }
}

/// Two-level feature-label memory: image-level (class token) and
/// patch-level (region prototype) keys with their one-hot values.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    d: usize,
    cls_keys: Array2<f32>,
    cls_values: Vec<Label>,
    patch_keys: Array2<f32>,
    patch_values: Vec<Label>,
    source_tag: String,
}

impl MemoryBank {
    pub fn new(
        cls_keys: Array2<f32>,
        cls_values: Vec<Label>,
        patch_keys: Array2<f32>,
        patch_values: Vec<Label>,
    ) -> Result<Self> {
        let d = cls_keys.ncols();
        if d == 0 {
            return Err(Error::Empty("feature dimension".into()));
        }
        if patch_keys.ncols() != d {
            return Err(Error::dims("patch key width", d, patch_keys.ncols()));
        }
        for (name, keys, values) in [
            ("image-level memory", &cls_keys, &cls_values),
            ("patch-level memory", &patch_keys, &patch_values),
        ] {
            if keys.nrows() == 0 {
                return Err(Error::Empty(name.into()));
            }
            if keys.nrows() != values.len() {
                return Err(Error::dims(
                    format!("{name} values"),
                    keys.nrows(),
                    values.len(),
                ));
            }
            for (i, row) in keys.rows().into_iter().enumerate() {
                let n = row_norm(row);
                if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::OutOfRange(format!(
                        "{name} key {i} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            d,
            cls_keys,
            cls_values,
            patch_keys,
            patch_values,
            source_tag: String::new(),
        })
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of image-level entries (N_c).
    pub fn n_cls(&self) -> usize {
        self.cls_values.len()
    }

    /// Number of patch-level entries (N_p).
    pub fn n_patch(&self) -> usize {
        self.patch_values.len()
    }

    pub fn cls_keys(&self) -> &Array2<f32> {
        &self.cls_keys
    }

    pub fn cls_values(&self) -> &[Label] {
        &self.cls_values
    }

    pub fn patch_keys(&self) -> &Array2<f32> {
        &self.patch_keys
    }

    pub fn patch_values(&self) -> &[Label] {
        &self.patch_values
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Replaces the patch-level memory, keeping the image level untouched.
    pub(crate) fn with_patch_memory(&self, keys: Array2<f32>, values: Vec<Label>) -> Self {
        Self {
            patch_keys: keys,
            patch_values: values,
            ..self.clone()
        }
    }
}

fn row_norm(row: ArrayView1<'_, f32>) -> f64 {
    row.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// The pair of linear maps `W_q`, `W_k` inserted in one retrieval head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
}

impl HeadWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            query: Array2::eye(d),
            key: Array2::eye(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
        }
    }

    fn is_finite(&self) -> bool {
        self.query
            .iter()
            .chain(self.key.iter())
            .all(|x| x.is_finite())
    }
}

/// Fine-tuned retrieval metric for the classification and segmentation heads.
///
/// Held in f64 for training; persisted as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricWeights {
    pub cls: HeadWeights,
    pub seg: HeadWeights,
}

impl MetricWeights {
    /// Identity maps: retrieval with these weights reproduces train-free retrieval.
    pub fn identity(d: usize) -> Self {
        Self {
            cls: HeadWeights::identity(d),
            seg: HeadWeights::identity(d),
        }
    }

    pub fn d(&self) -> usize {
        self.cls.query.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        for m in [
            &self.cls.query,
            &self.cls.key,
            &self.seg.query,
            &self.seg.key,
        ] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dims(
                    "metric weight matrix",
                    d,
                    m.nrows().max(m.ncols()),
                ));
            }
        }
        if !(self.cls.is_finite() && self.seg.is_finite()) {
            return Err(Error::NonFinite("metric weights".into()));
        }
        Ok(())
    }

    /// The four matrices in persisted order: Wq_cls, Wk_cls, Wq_seg, Wk_seg.
    pub fn matrices(&self) -> [&Array2<f64>; 4] {
        [
            &self.cls.query,
            &self.cls.key,
            &self.seg.query,
            &self.seg.key,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [
            &mut self.cls.query,
            &mut self.cls.key,
            &mut self.seg.query,
            &mut self.seg.key,
        ]
    }
}

/// Retrieval hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    /// Softmax temperature.
    pub tau: f64,
    /// Fraction of each class-token query's most similar keys dropped during training.
    pub rho_cls: f64,
    /// Same, for patch queries.
    pub rho_seg: f64,
    /// Fraction of map pixels averaged into the image score.
    pub topk_fraction: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            rho_cls: 0.05,
            rho_seg: 0.20,
            topk_fraction: 0.01,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "tau = {} must be positive",
                self.tau
            )));
        }
        for (name, rho) in [("rho_cls", self.rho_cls), ("rho_seg", self.rho_seg)] {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::OutOfRange(format!(
                    "{name} = {rho} must lie in [0, 1)"
                )));
            }
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "topk fraction {} must lie in (0, 1]",
                self.topk_fraction
            )));
        }
        Ok(())
    }
}

/// Per-pixel anomaly scores at full image resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::OutOfRange("anomaly map must be non-empty".into()));
        }
        if scores.len() != height * width {
            return Err(Error::dims("anomaly map", height * width, scores.len()));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            scores: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Dataset-level mean retrieval similarities of anomalous/normal queries to
/// anomalous/normal keys. Statistics over an empty query set are absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "AqAk", default, skip_serializing_if = "Option::is_none")]
    pub aq_ak: Option<f64>,
    #[serde(rename = "NqAk", default, skip_serializing_if = "Option::is_none")]
    pub nq_ak: Option<f64>,
    #[serde(rename = "AqNk", default, skip_serializing_if = "Option::is_none")]
    pub aq_nk: Option<f64>,
    #[serde(rename = "NqNk", default, skip_serializing_if = "Option::is_none")]
    pub nq_nk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_n: Option<f64>,
    pub anomalous_queries: usize,
    pub normal_queries: usize,
}

impl DatasetStats {
    pub fn from_means(
        anomalous: Option<f64>,
        normal: Option<f64>,
        anomalous_queries: usize,
        normal_queries: usize,
    ) -> Self {
        let aq_nk = anomalous.map(|a| 1.0 - a);
        let nq_nk = normal.map(|n| 1.0 - n);
        Self {
            aq_ak: anomalous,
            nq_ak: normal,
            aq_nk,
            nq_nk,
            margin_a: anomalous.zip(normal).map(|(a, n)| a - n),
            margin_n: nq_nk.zip(aq_nk).map(|(n, a)| n - a),
            anomalous_queries,
            normal_queries,
        }
    }
}
