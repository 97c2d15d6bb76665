//! Composite server loss and Fisher-information freezing of local models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::PrototypeBatch;
use crate::tensor::{softmax_cross_entropy, DenseNet, FreezeMask, Matrix, ParamBuffer};

/// Weights of the real-data, class-replay and feature-replay terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_a: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 0.5,
            lambda_a: 0.5,
            lambda_f: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_a", self.lambda_a),
            ("lambda_f", self.lambda_f),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ComposedLoss {
    pub total: f64,
    pub ce: f64,
    /// `None` when the batch was absent or its weight is zero.
    pub class_replay: Option<f64>,
    pub feature_replay: Option<f64>,
    /// Weighted gradient of `total` w.r.t. the server parameters.
    pub server_grads: ParamBuffer<f64>,
    /// Gradient of `total` w.r.t. the real global-embedding batch.
    pub embedding_grad: Matrix,
}

/// `λ_CE·CE(real) + λ_A·CE(class replay) + λ_F·CE(feature replay)`, each
/// term a batch-mean cross-entropy of `server`. Only the real-data term
/// depends on the embeddings, so only it contributes to `embedding_grad`.
pub fn compose_loss(
    server: &mut DenseNet,
    embeddings: &Matrix,
    labels: &[usize],
    class_replay: Option<&PrototypeBatch>,
    feature_replay: Option<&PrototypeBatch>,
    weights: &LossWeights,
) -> Result<ComposedLoss> {
    weights.validate()?;
    let logits = server.forward(embeddings)?;
    let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut grads = server.backward(&dlogits.scaled(weights.lambda_ce))?;
    let mut total = weights.lambda_ce * ce;

    let mut replay = |batch: Option<&PrototypeBatch>, weight: f64| -> Result<Option<f64>> {
        let Some(batch) = batch.filter(|_| weight > 0.0) else {
            return Ok(None);
        };
        let logits = server.forward(&batch.vectors)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
        let g = server.backward(&dlogits.scaled(weight))?;
        grads.params.add_scaled(&g.params, 1.0)?;
        total += weight * loss;
        Ok(Some(loss))
    };
    let a = replay(class_replay, weights.lambda_a)?;
    let f = replay(feature_replay, weights.lambda_f)?;

    if !total.is_finite() {
        return Err(Error::NonFinite(format!("composite loss is {total}")));
    }
    Ok(ComposedLoss {
        total,
        ce,
        class_replay: a,
        feature_replay: f,
        server_grads: grads.params,
        embedding_grad: grads.input,
    })
}

/// Diagonal Fisher information: mean of squared per-sample gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    pub values: ParamBuffer<f64>,
    pub sample_count: usize,
}

/// Streaming sum of squared gradients.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sum_sq: ParamBuffer<f64>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            sum_sq: ParamBuffer::zeros(shapes),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &ParamBuffer<f64>) -> Result<()> {
        grads.ensure_shapes(&self.sum_sq.shapes(), "fisher sample")?;
        for (s, g) in self.sum_sq.iter_mut().zip(grads.iter()) {
            *s += g * g;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<FisherInfo> {
        if self.count == 0 {
            return Err(Error::State("Fisher estimate needs at least one gradient sample".into()));
        }
        self.sum_sq.scale(1.0 / self.count as f64);
        Ok(FisherInfo {
            values: self.sum_sq,
            sample_count: self.count,
        })
    }
}

/// `F = (1/N) Σ g_i²` elementwise over per-sample parameter gradients.
pub fn estimate_fisher(
    shapes: &[(usize, usize)],
    gradient_samples: &[ParamBuffer<f64>],
) -> Result<FisherInfo> {
    let mut acc = FisherAccumulator::new(shapes);
    for g in gradient_samples {
        acc.add(g)?;
    }
    acc.finish()
}

impl FisherInfo {
    /// Elementwise maximum with an earlier estimate; `earlier` is widened
    /// with zeros if the model has grown since.
    pub fn max_with(&mut self, earlier: &FisherInfo) -> Result<()> {
        let mut old = earlier.values.clone();
        let shapes = self.values.shapes();
        if old.shapes() != shapes {
            let (in_rows, _) = shapes[0];
            let out_cols = shapes[shapes.len() - 1].1;
            old.grow_input_rows(in_rows, 0.0)?;
            old.grow_output_cols(out_cols, 0.0)?;
            old.ensure_shapes(&shapes, "accumulated Fisher")?;
        }
        for (a, b) in self.values.iter_mut().zip(old.iter()) {
            *a = a.max(*b);
        }
        self.sample_count += earlier.sample_count;
        Ok(())
    }
}

/// `δ = k0 + α·ln(t+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub k0: f64,
    pub alpha: f64,
    pub task_index: usize,
}

impl FreezePolicy {
    pub fn delta(&self) -> f64 {
        self.k0 + self.alpha * ((self.task_index + 1) as f64).ln()
    }
}

/// Whether the threshold statistics span the whole model or each tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    Model,
    Layer,
}

fn mean_minus_delta_std(values: &[f64], delta: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    mean - delta * var.sqrt()
}

/// `κ = mean(F) − δ·std(F)` over every entry, population std.
pub fn compute_threshold(fisher: &FisherInfo, policy: &FreezePolicy) -> Result<f64> {
    if fisher.values.is_empty() {
        return Err(Error::State("empty Fisher information".into()));
    }
    let all: Vec<f64> = fisher.values.iter().copied().collect();
    Ok(mean_minus_delta_std(&all, policy.delta()))
}

/// True where `F ≥ κ`.
pub fn build_freeze_mask(fisher: &FisherInfo, kappa: f64) -> FreezeMask {
    let shapes = fisher.values.shapes();
    let mut mask = FreezeMask::filled(&shapes, false);
    for (m, f) in mask.iter_mut().zip(fisher.values.iter()) {
        *m = *f >= kappa;
    }
    mask
}

/// Unfreezes the lowest-Fisher frozen entries until at most
/// `⌊max_fraction·n⌋` remain frozen. Returns how many were released.
pub fn cap_frozen_fraction(mask: &mut FreezeMask, fisher: &FisherInfo, max_fraction: f64) -> usize {
    let n = mask.len();
    let cap = (max_fraction.clamp(0.0, 1.0) * n as f64).floor() as usize;
    let frozen = mask.count_true();
    if frozen <= cap {
        return 0;
    }
    let f: Vec<f64> = fisher.values.iter().copied().collect();
    let mut idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
    let release = frozen - cap;
    let mut flat: Vec<&mut bool> = mask.iter_mut().collect();
    for &i in &idx[..release] {
        *flat[i] = false;
    }
    release
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeOutcome {
    pub mask: FreezeMask,
    /// One threshold for model scope, one per tensor for layer scope.
    pub kappa: Vec<f64>,
    pub delta: f64,
    /// The threshold alone would have frozen every parameter.
    pub saturated: bool,
    pub released_by_cap: usize,
}

/// Threshold, mask and trainability cap in one step.
pub fn freeze_from_fisher(
    fisher: &FisherInfo,
    policy: &FreezePolicy,
    scope: ThresholdScope,
    max_frozen_fraction: f64,
) -> Result<FreezeOutcome> {
    let (mut mask, kappa) = match scope {
        ThresholdScope::Model => {
            let k = compute_threshold(fisher, policy)?;
            (build_freeze_mask(fisher, k), vec![k])
        }
        ThresholdScope::Layer => {
            let shapes = fisher.values.shapes();
            let mut mask = FreezeMask::filled(&shapes, false);
            let mut kappas = Vec::with_capacity(shapes.len());
            for i in 0..shapes.len() {
                let values = &fisher.values.tensor(i).values;
                let k = if values.is_empty() {
                    0.0
                } else {
                    mean_minus_delta_std(values, policy.delta())
                };
                for (m, f) in mask.tensor_mut(i).values.iter_mut().zip(values) {
                    *m = *f >= k;
                }
                kappas.push(k);
            }
            (mask, kappas)
        }
    };
    let saturated = mask.count_true() == mask.len();
    if saturated {
        log::info!(
            "freeze threshold saturated (delta {:.3}); capping frozen fraction at {max_frozen_fraction}",
            policy.delta()
        );
    }
    let released_by_cap = cap_frozen_fraction(&mut mask, fisher, max_frozen_fraction);
    Ok(FreezeOutcome {
        mask,
        kappa,
        delta: policy.delta(),
        saturated,
        released_by_cap,
    })
}
