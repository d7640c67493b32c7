//! Softmax retrieval against the memory bank, train-free and with learned
//! query/key maps, plus the dataset-level similarity statistics.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::membank::patch_labels;
use crate::types::{
    l2_normalized, DatasetStats, ImageRecord, Label, MemoryBank, MetricWeights, PatchGrid,
    RetrievalParams,
};

/// Per-query sets of memory indices excluded from the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    masked: Vec<Vec<usize>>,
}

/// Number of keys masked per query: `floor(rho · n)`.
pub fn masked_count(rho: f64, n: usize) -> usize {
    // the epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    ((rho * n as f64) + 1e-9).floor() as usize
}

impl DropoutMask {
    pub fn new(masked: Vec<Vec<usize>>) -> Self {
        Self { masked }
    }

    /// Masks, per query, the `floor(rho · N)` keys with the highest raw
    /// similarity `q · k`. Ties go to the lower memory index.
    pub fn top_similarities(
        queries: ArrayView2<'_, f64>,
        keys: ArrayView2<'_, f64>,
        rho: f64,
    ) -> Result<Self> {
        let n = keys.nrows();
        let count = masked_count(rho, n);
        if count >= n {
            return Err(Error::OutOfRange(format!(
                "rho = {rho} masks all {n} memory entries"
            )));
        }
        let masked = queries
            .outer_iter()
            .map(|q| {
                if count == 0 {
                    return Vec::new();
                }
                let q = q.as_slice().expect("standard layout");
                let mut order: Vec<(f64, usize)> = keys
                    .outer_iter()
                    .enumerate()
                    .map(|(j, k)| (dot(q, k.as_slice().expect("standard layout")), j))
                    .collect();
                let by_rank =
                    |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
                order.select_nth_unstable_by(count - 1, by_rank);
                let mut top: Vec<usize> = order[..count].iter().map(|&(_, j)| j).collect();
                top.sort_unstable();
                top
            })
            .collect();
        Ok(Self { masked })
    }

    pub fn masked(&self, query: usize) -> &[usize] {
        &self.masked[query]
    }

    pub fn queries(&self) -> usize {
        self.masked.len()
    }
}

/// Sequential dot product; fixed summation order keeps results schedule-independent.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Softmax weights of one query over all keys. `masked` must be sorted.
pub(crate) fn attention_weights(
    query: &[f64],
    keys: ArrayView2<'_, f64>,
    tau: f64,
    masked: &[usize],
    query_index: usize,
) -> Result<Vec<f64>> {
    let mut logits: Vec<f64> = keys
        .outer_iter()
        .map(|k| dot(query, k.as_slice().expect("standard layout")) / tau)
        .collect();
    for &j in masked {
        logits[j] = f64::NEG_INFINITY;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllKeysMasked(query_index));
    }
    if !max.is_finite() {
        return Err(Error::NonFinite(format!(
            "retrieval logits of query {query_index}"
        )));
    }
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.iter_mut().for_each(|w| *w /= sum);
    Ok(logits)
}

/// Mixes one-hot values with softmax weights into a `[normal, anomalous]` row.
pub(crate) fn mix_values(weights: &[f64], values: &[Label]) -> [f64; 2] {
    let mut out = [0.0, 0.0];
    for (&w, v) in weights.iter().zip(values) {
        out[usize::from(v.is_anomalous())] += w;
    }
    out
}

/// `softmax(Q Kᵀ / τ + M) V` row by row, with masked entries at −∞.
///
/// `queries` is `m × d`, `keys` is `N × d`; one output row per query.
pub fn masked_softmax_retrieve(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: &[Label],
    tau: f64,
    mask: Option<&DropoutMask>,
) -> Result<Vec<[f64; 2]>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::dims("query width", keys.ncols(), queries.ncols()));
    }
    if keys.nrows() != values.len() {
        return Err(Error::dims("memory values", keys.nrows(), values.len()));
    }
    if keys.nrows() == 0 {
        return Err(Error::Empty("memory".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::OutOfRange(format!("tau = {tau} must be positive")));
    }
    if let Some(m) = mask {
        if m.queries() != queries.nrows() {
            return Err(Error::dims("dropout mask", queries.nrows(), m.queries()));
        }
    }
    if queries.iter().chain(keys.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("retrieval inputs".into()));
    }
    let queries = queries.as_standard_layout();
    let keys = keys.as_standard_layout();
    (0..queries.nrows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let masked = mask.map_or(&[][..], |m| m.masked(i));
            let w = attention_weights(
                q.as_slice().expect("standard layout"),
                keys.view(),
                tau,
                masked,
                i,
            )?;
            Ok(mix_values(&w, values))
        })
        .collect()
}

/// Retrieval output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    /// Image-level `[normal, anomalous]` scores.
    pub y_cls: [f64; 2],
    /// Per-patch `[normal, anomalous]` scores in grid order.
    pub y_seg: Vec<[f64; 2]>,
}

impl RetrievalOutput {
    pub fn patch_anomaly(&self) -> Vec<f64> {
        self.y_seg.iter().map(|r| r[1]).collect()
    }
}

/// Row-normalized f64 queries of one record: class token (1 × d) and patches (u × d).
pub(crate) fn record_queries(record: &ImageRecord, d: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if record.cls_feature.len() != d {
        return Err(Error::dims(
            format!("class feature of {:?}", record.id),
            d,
            record.cls_feature.len(),
        ));
    }
    if record.patch_features.is_empty() || !record.patch_features.len().is_multiple_of(d) {
        return Err(Error::dims(
            format!("patch features of {:?}", record.id),
            d,
            record.patch_features.len(),
        ));
    }
    let cls = l2_normalized(&record.cls_feature)
        .ok_or_else(|| Error::ZeroVector(format!("class feature of {:?}", record.id)))?;
    let u = record.patch_features.len() / d;
    let mut patches = Vec::with_capacity(u * d);
    for (i, f) in record.patch_features.chunks_exact(d).enumerate() {
        patches.extend(
            l2_normalized(f)
                .ok_or_else(|| Error::ZeroVector(format!("patch {i} of {:?}", record.id)))?,
        );
    }
    Ok((
        Array2::from_shape_vec((1, d), cls).expect("width d"),
        Array2::from_shape_vec((u, d), patches).expect("u rows of width d"),
    ))
}

pub(crate) fn keys_f64(keys: &Array2<f32>) -> Array2<f64> {
    keys.mapv(f64::from)
}

/// One retrieval head: raw keys (for the dropout mask), keys as seen by the
/// softmax (projected when a key map is set), and an optional query map.
pub(crate) struct Head {
    pub raw_keys: Array2<f64>,
    pub projected_keys: Option<Array2<f64>>,
    pub query_map: Option<Array2<f64>>,
    pub values: Vec<Label>,
    pub rho: f64,
}

impl Head {
    fn new(
        keys: &Array2<f32>,
        values: &[Label],
        rho: f64,
        maps: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> Self {
        let raw_keys = keys_f64(keys);
        let (query_map, projected_keys) = match maps {
            Some((wq, wk)) => (Some(wq.clone()), Some(raw_keys.dot(wk))),
            None => (None, None),
        };
        Self {
            raw_keys,
            projected_keys,
            query_map,
            values: values.to_vec(),
            rho,
        }
    }

    pub fn keys(&self) -> ArrayView2<'_, f64> {
        self.projected_keys
            .as_ref()
            .unwrap_or(&self.raw_keys)
            .view()
    }

    pub fn run(&self, queries: &Array2<f64>, tau: f64, training: bool) -> Result<Vec<[f64; 2]>> {
        let mask = if training {
            Some(DropoutMask::top_similarities(
                queries.view(),
                self.raw_keys.view(),
                self.rho,
            )?)
        } else {
            None
        };
        match &self.query_map {
            Some(wq) => {
                let projected = queries.dot(wq);
                masked_softmax_retrieve(
                    projected.view(),
                    self.keys(),
                    &self.values,
                    tau,
                    mask.as_ref(),
                )
            }
            None => masked_softmax_retrieve(
                queries.view(),
                self.keys(),
                &self.values,
                tau,
                mask.as_ref(),
            ),
        }
    }
}

/// Retrieval engine bound to a bank (and optionally learned metric weights).
/// Key projections are computed once at construction.
pub struct Retriever {
    d: usize,
    params: RetrievalParams,
    cls: Head,
    seg: Head,
}

impl Retriever {
    pub fn train_free(bank: &MemoryBank, params: RetrievalParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            d: bank.d(),
            params,
            cls: Head::new(bank.cls_keys(), bank.cls_values(), params.rho_cls, None),
            seg: Head::new(bank.patch_keys(), bank.patch_values(), params.rho_seg, None),
        })
    }

    pub fn fine_tuned(
        bank: &MemoryBank,
        weights: &MetricWeights,
        params: RetrievalParams,
    ) -> Result<Self> {
        params.validate()?;
        weights.validate()?;
        if weights.d() != bank.d() {
            return Err(Error::dims("metric weights", bank.d(), weights.d()));
        }
        Ok(Self {
            d: bank.d(),
            params,
            cls: Head::new(
                bank.cls_keys(),
                bank.cls_values(),
                params.rho_cls,
                Some((&weights.cls.query, &weights.cls.key)),
            ),
            seg: Head::new(
                bank.patch_keys(),
                bank.patch_values(),
                params.rho_seg,
                Some((&weights.seg.query, &weights.seg.key)),
            ),
        })
    }

    pub fn params(&self) -> &RetrievalParams {
        &self.params
    }

    /// Inference: every memory entry participates.
    pub fn retrieve(&self, record: &ImageRecord) -> Result<RetrievalOutput> {
        self.run(record, false)
    }

    /// Training-mode forward: each query's top-ρ raw similarities are dropped.
    pub fn retrieve_training(&self, record: &ImageRecord) -> Result<RetrievalOutput> {
        self.run(record, true)
    }

    fn run(&self, record: &ImageRecord, training: bool) -> Result<RetrievalOutput> {
        let (cls_q, patch_q) = record_queries(record, self.d)?;
        let y_cls = self.cls.run(&cls_q, self.params.tau, training)?[0];
        let y_seg = self.seg.run(&patch_q, self.params.tau, training)?;
        Ok(RetrievalOutput { y_cls, y_seg })
    }
}

/// Train-free retrieval of one image against the bank.
pub fn retrieve_tf(
    record: &ImageRecord,
    bank: &MemoryBank,
    params: &RetrievalParams,
) -> Result<RetrievalOutput> {
    Retriever::train_free(bank, *params)?.retrieve(record)
}

/// Retrieval through learned query/key maps; `training` enables similarity dropout.
pub fn retrieve_ft(
    record: &ImageRecord,
    bank: &MemoryBank,
    weights: &MetricWeights,
    params: &RetrievalParams,
    training: bool,
) -> Result<RetrievalOutput> {
    Retriever::fine_tuned(bank, weights, *params)?.run(record, training)
}

/// Mean patch anomaly scores over anomalous and normal query patches.
///
/// Only records whose patch labels are known take part (see
/// [`patch_labels`]); an empty query set leaves its statistics absent.
pub fn dataset_statistics(
    queries: &[ImageRecord],
    grid: &PatchGrid,
    bank: &MemoryBank,
    params: &RetrievalParams,
    weights: Option<&MetricWeights>,
) -> Result<DatasetStats> {
    let retriever = match weights {
        Some(w) => Retriever::fine_tuned(bank, w, *params)?,
        None => Retriever::train_free(bank, *params)?,
    };
    let per_image = queries
        .par_iter()
        .map(|r| -> Result<Option<(f64, usize, f64, usize)>> {
            let Some(labels) = patch_labels(r, grid)? else {
                return Ok(None);
            };
            let out = retriever.retrieve(r)?;
            if out.y_seg.len() != labels.len() {
                return Err(Error::dims(
                    format!("patches of {:?}", r.id),
                    labels.len(),
                    out.y_seg.len(),
                ));
            }
            let (mut sa, mut na, mut sn, mut nn) = (0.0, 0, 0.0, 0);
            for (y, &anomalous) in out.y_seg.iter().zip(&labels) {
                if anomalous {
                    sa += y[1];
                    na += 1;
                } else {
                    sn += y[1];
                    nn += 1;
                }
            }
            Ok(Some((sa, na, sn, nn)))
        })
        .collect::<Result<Vec<_>>>()?;

    let (mut sa, mut na, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (a, b, c, e) in per_image.into_iter().flatten() {
        sa += a;
        na += b;
        sn += c;
        nn += e;
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(DatasetStats::from_means(mean(sa, na), mean(sn, nn), na, nn))
}
