use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{forward_backward, MetricGradients};
use super::loss::LossBreakdown;
use crate::error::{Error, Result};
use crate::types::{ImageRecord, MemoryBank, MetricWeights, PatchGrid, RetrievalParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 8,
            epochs: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam {name} = {b} must lie in [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("Adam epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Adam moment estimates for the four weight matrices.
struct Adam {
    config: TrainConfig,
    step: i32,
    first: [Array2<f64>; 4],
    second: [Array2<f64>; 4],
}

impl Adam {
    fn new(config: TrainConfig, d: usize) -> Self {
        let z = || Array2::<f64>::zeros((d, d));
        Self {
            config,
            step: 0,
            first: [z(), z(), z(), z()],
            second: [z(), z(), z(), z()],
        }
    }

    fn update(&mut self, weights: &mut MetricWeights, grads: &MetricGradients) {
        self.step += 1;
        let TrainConfig {
            learning_rate: lr,
            adam_beta1: b1,
            adam_beta2: b2,
            adam_eps: eps,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((w, g), m), v) in weights
            .matrices_mut()
            .into_iter()
            .zip(grads.matrices())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(w)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub loss: LossBreakdown,
    /// Frobenius norms of ∂L/∂Wq_cls, ∂L/∂Wk_cls, ∂L/∂Wq_seg, ∂L/∂Wk_seg.
    pub grad_norms: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub weights: MetricWeights,
    pub steps: Vec<StepRecord>,
}

/// Fine-tunes both heads' maps from identity with Adam.
///
/// Images are reshuffled every epoch by the seeded generator; the last
/// partial batch is kept. Queries are not excluded from the bank they were
/// built into: similarity dropout removes the self-matches.
pub fn train(
    aux: &[ImageRecord],
    grid: &PatchGrid,
    bank: &MemoryBank,
    config: &TrainConfig,
    params: &RetrievalParams,
) -> Result<TrainRun> {
    config.validate()?;
    params.validate()?;
    if aux.is_empty() {
        return Err(Error::Empty("training images".into()));
    }
    let d = bank.d();
    let mut weights = MetricWeights::identity(d);
    let mut adam = Adam::new(*config, d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    let mut steps = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ImageRecord> = chunk.iter().map(|&i| aux[i].clone()).collect();
            let (loss, grads) = forward_backward(&batch, grid, bank, &weights, params)?;
            adam.update(&mut weights, &grads);
            if weights.validate().is_err() {
                return Err(Error::NonFinite(format!(
                    "weights after step {}",
                    steps.len() + 1
                )));
            }
            steps.push(StepRecord {
                epoch,
                step: steps.len() + 1,
                batch_size: batch.len(),
                loss,
                grad_norms: grads.norms(),
            });
            log::debug!("step {} loss {:.6}", steps.len(), loss.total);
        }
    }
    Ok(TrainRun { weights, steps })
}
