//! Training forward pass and analytic gradients of the fine-tuning loss with
//! respect to the four projection matrices.
//!
//! For one head with normalized queries `Q`, raw keys `K`, maps `Wq`, `Wk`:
//!
//! ```text
//! A = Q Wq,  B = K Wk,  S = A Bᵀ / τ + M,  P = softmax_rows(S),  y = P v
//! ∂L/∂S_ij = P_ij · ∂L/∂y_i · (v_j − y_i) / τ        (scaled by 1/τ below)
//! ∂L/∂A = G B,  ∂L/∂B = Gᵀ A,  ∂L/∂Wq = Qᵀ ∂L/∂A,  ∂L/∂Wk = Kᵀ ∂L/∂B
//! ```
//!
//! where `v` is the anomaly column of the one-hot values and `M` the
//! similarity-dropout mask, held constant.

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::loss::{
    bce_grad, bce_loss, dice_grad, dice_loss, focal_grad, focal_loss, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::membank::patch_labels;
use crate::retrieval::{attention_weights, keys_f64, record_queries, DropoutMask};
use crate::types::{
    HeadWeights, ImageRecord, Label, MemoryBank, MetricWeights, PatchGrid, RetrievalParams,
};

/// Gradients for both heads, same layout as [`MetricWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGradients {
    pub cls: HeadWeights,
    pub seg: HeadWeights,
}

impl MetricGradients {
    pub fn zeros(d: usize) -> Self {
        Self {
            cls: HeadWeights::zeros(d),
            seg: HeadWeights::zeros(d),
        }
    }

    /// Same order as [`MetricWeights::matrices`].
    pub fn matrices(&self) -> [&Array2<f64>; 4] {
        [
            &self.cls.query,
            &self.cls.key,
            &self.seg.query,
            &self.seg.key,
        ]
    }

    /// Frobenius norms in matrix order.
    pub fn norms(&self) -> [f64; 4] {
        self.matrices()
            .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
    }
}

/// Memory of one head prepared for a given set of weights.
struct HeadMemory<'a> {
    raw_keys: Array2<f64>,
    projected_keys: Array2<f64>,
    anomaly_values: Vec<f64>,
    labels: &'a [Label],
    weights: &'a HeadWeights,
    rho: f64,
}

impl<'a> HeadMemory<'a> {
    fn new(keys: &Array2<f32>, labels: &'a [Label], weights: &'a HeadWeights, rho: f64) -> Self {
        let raw_keys = keys_f64(keys);
        let projected_keys = raw_keys.dot(&weights.key);
        Self {
            raw_keys,
            projected_keys,
            anomaly_values: labels.iter().map(|l| l.one_hot()[1]).collect(),
            labels,
            weights,
            rho,
        }
    }
}

/// Forward state of one head for one image.
struct HeadPass {
    queries: Array2<f64>,
    projected: Array2<f64>,
    probs: Array2<f64>,
    anomaly: Vec<f64>,
}

fn head_forward(queries: Array2<f64>, mem: &HeadMemory<'_>, tau: f64) -> Result<HeadPass> {
    let mask = DropoutMask::top_similarities(queries.view(), mem.raw_keys.view(), mem.rho)?;
    let projected = queries.dot(&mem.weights.query);
    let n = mem.projected_keys.nrows();
    let rows = (0..projected.nrows())
        .into_par_iter()
        .map(|i| {
            let q = projected.row(i);
            attention_weights(
                q.as_slice().expect("standard layout"),
                mem.projected_keys.view(),
                tau,
                mask.masked(i),
                i,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probs = Array2::zeros((rows.len(), n));
    let mut anomaly = Vec::with_capacity(rows.len());
    for (i, w) in rows.into_iter().enumerate() {
        anomaly.push(
            w.iter()
                .zip(mem.labels)
                .filter(|(_, l)| l.is_anomalous())
                .map(|(p, _)| p)
                .sum(),
        );
        probs.row_mut(i).assign(&ndarray::ArrayView1::from(&w[..]));
    }
    Ok(HeadPass {
        queries,
        projected,
        probs,
        anomaly,
    })
}

/// Accumulated `∂L/∂Wq` and `∂L/∂B` of one head.
struct HeadAccum {
    d_query_map: Array2<f64>,
    d_projected_keys: Array2<f64>,
}

impl HeadAccum {
    fn new(n: usize, d: usize) -> Self {
        Self {
            d_query_map: Array2::zeros((d, d)),
            d_projected_keys: Array2::zeros((n, d)),
        }
    }

    fn finish(self, mem: &HeadMemory<'_>) -> HeadWeights {
        HeadWeights {
            query: self.d_query_map,
            key: mem.raw_keys.t().dot(&self.d_projected_keys),
        }
    }
}

fn head_backward(
    pass: &HeadPass,
    d_anomaly: &[f64],
    mem: &HeadMemory<'_>,
    tau: f64,
    acc: &mut HeadAccum,
) {
    let mut g = pass.probs.clone();
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let dy = d_anomaly[i] / tau;
        let y = pass.anomaly[i];
        for (gij, &v) in row.iter_mut().zip(&mem.anomaly_values) {
            *gij *= dy * (v - y);
        }
    }
    let d_projected_queries = g.dot(&mem.projected_keys);
    acc.d_projected_keys += &g.t().dot(&pass.projected);
    acc.d_query_map += &pass.queries.t().dot(&d_projected_queries);
}

/// Per-image training forward, with the inputs needed for backward.
struct ImagePass {
    cls: HeadPass,
    seg: HeadPass,
    label: Label,
    targets: Option<Vec<bool>>,
}

/// Loss of a batch and its gradients with respect to all four maps.
///
/// The loss averages BCE over all images and dice/focal over the images whose
/// patch labels are known. Similarity dropout is applied and held constant.
pub fn forward_backward(
    batch: &[ImageRecord],
    grid: &PatchGrid,
    bank: &MemoryBank,
    weights: &MetricWeights,
    params: &RetrievalParams,
) -> Result<(LossBreakdown, MetricGradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    params.validate()?;
    weights.validate()?;
    let d = bank.d();
    if weights.d() != d {
        return Err(Error::dims("metric weights", d, weights.d()));
    }
    let cls_mem = HeadMemory::new(
        bank.cls_keys(),
        bank.cls_values(),
        &weights.cls,
        params.rho_cls,
    );
    let seg_mem = HeadMemory::new(
        bank.patch_keys(),
        bank.patch_values(),
        &weights.seg,
        params.rho_seg,
    );
    let tau = params.tau;

    let passes = batch
        .iter()
        .map(|r| -> Result<ImagePass> {
            let (cq, pq) = record_queries(r, d)?;
            if pq.nrows() != grid.patches() {
                return Err(Error::dims(
                    format!("patches of {:?}", r.id),
                    grid.patches(),
                    pq.nrows(),
                ));
            }
            Ok(ImagePass {
                cls: head_forward(cq, &cls_mem, tau)?,
                seg: head_forward(pq, &seg_mem, tau)?,
                label: r.label,
                targets: patch_labels(r, grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_images = passes.len() as f64;
    let n_seg = passes.iter().filter(|p| p.targets.is_some()).count();
    let (mut bce, mut dice, mut focal) = (0.0, 0.0, 0.0);
    let mut cls_acc = HeadAccum::new(bank.n_cls(), d);
    let mut seg_acc = HeadAccum::new(bank.n_patch(), d);
    for p in &passes {
        let y = p.cls.anomaly[0];
        let anomalous = p.label.is_anomalous();
        bce += bce_loss(y, anomalous) / n_images;
        let dy = [bce_grad(y, anomalous) / n_images];
        head_backward(&p.cls, &dy, &cls_mem, tau, &mut cls_acc);

        if let Some(t) = &p.targets {
            let ys = &p.seg.anomaly;
            let scale = 1.0 / n_seg as f64;
            dice += dice_loss(ys, t) * scale;
            focal += focal_loss(ys, t) * scale;
            let dys: Vec<f64> = dice_grad(ys, t)
                .into_iter()
                .zip(focal_grad(ys, t))
                .map(|(a, b)| (a + b) * scale)
                .collect();
            head_backward(&p.seg, &dys, &seg_mem, tau, &mut seg_acc);
        }
    }

    let grads = MetricGradients {
        cls: cls_acc.finish(&cls_mem),
        seg: seg_acc.finish(&seg_mem),
    };
    let loss = LossBreakdown::new(bce, dice, focal);
    if !loss.total.is_finite() || grads.norms().iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("training loss or gradients".into()));
    }
    Ok((loss, grads))
}

/// Loss of a batch without gradients (training-mode forward).
pub fn batch_loss(
    batch: &[ImageRecord],
    grid: &PatchGrid,
    bank: &MemoryBank,
    weights: &MetricWeights,
    params: &RetrievalParams,
) -> Result<LossBreakdown> {
    forward_backward(batch, grid, bank, weights, params).map(|(l, _)| l)
}
