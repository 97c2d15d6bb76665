use rand::Rng;

use super::message::{Direction, RoundMessage};
use crate::continual::{compose_loss, ComposedLoss, FisherInfo, LossWeights};
use crate::data::PartyFeatures;
use crate::error::{Error, Result};
use crate::prototype::PrototypeBatch;
use crate::tensor::{DenseNet, FreezeMask, GradientSet, Matrix};

/// Feature holder running a local model. Never sees labels: its API only
/// accepts [`PartyFeatures`] and gradient messages.
#[derive(Debug, Clone)]
pub struct PassiveParty {
    id: usize,
    model: DenseNet,
    /// Columns feeding the model input, in order.
    columns: Vec<usize>,
    fisher: Option<FisherInfo>,
    freeze_mask: Option<FreezeMask>,
    pending_batch: Option<usize>,
}

impl PassiveParty {
    pub fn new(id: usize, model: DenseNet, columns: Vec<usize>) -> Result<Self> {
        if model.input_dim() != columns.len() {
            return Err(Error::State(format!(
                "party {id}: model takes {} inputs but view has {} columns",
                model.input_dim(),
                columns.len()
            )));
        }
        Ok(Self {
            id,
            model,
            columns,
            fisher: None,
            freeze_mask: None,
            pending_batch: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &DenseNet {
        &self.model
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn embedding_dim(&self) -> usize {
        self.model.output_dim()
    }

    pub fn fisher(&self) -> Option<&FisherInfo> {
        self.fisher.as_ref()
    }

    pub fn freeze_mask(&self) -> Option<&FreezeMask> {
        self.freeze_mask.as_ref()
    }

    pub fn set_fisher(&mut self, fisher: FisherInfo) -> Result<()> {
        fisher
            .values
            .ensure_shapes(&self.model.param_shapes(), "Fisher information")?;
        self.fisher = Some(fisher);
        Ok(())
    }

    pub fn set_freeze_mask(&mut self, mask: Option<FreezeMask>) -> Result<()> {
        if let Some(m) = &mask {
            m.ensure_shapes(&self.model.param_shapes(), "freeze mask")?;
        }
        self.freeze_mask = mask;
        Ok(())
    }

    /// Extends the feature view. New columns get freshly initialised input
    /// rows; the mask marks them trainable and the Fisher entries start at 0.
    pub fn extend_view<R: Rng + ?Sized>(&mut self, view: &[usize], rng: &mut R) -> Result<()> {
        if view.len() < self.columns.len() || view[..self.columns.len()] != self.columns[..] {
            return Err(Error::State(format!(
                "party {}: new view {view:?} does not extend {:?}",
                self.id, self.columns
            )));
        }
        if view.len() == self.columns.len() {
            return Ok(());
        }
        self.model.grow_input(view.len(), rng)?;
        if let Some(mask) = &mut self.freeze_mask {
            mask.grow_input_rows(view.len(), false)?;
        }
        if let Some(f) = &mut self.fisher {
            f.values.grow_input_rows(view.len(), 0.0)?;
        }
        self.columns = view.to_vec();
        self.pending_batch = None;
        Ok(())
    }

    /// Computes this party's local embedding for `rows` and caches the
    /// forward pass for the matching gradient.
    pub fn passive_forward(
        &mut self,
        batch_index: usize,
        rows: &[usize],
        features: &PartyFeatures<'_>,
    ) -> Result<RoundMessage> {
        let x = features.gather(rows, &self.columns)?;
        let payload = self.model.forward(&x)?;
        self.pending_batch = Some(batch_index);
        Ok(RoundMessage {
            direction: Direction::EmbeddingUp,
            party_id: self.id,
            batch_index,
            payload,
        })
    }

    /// Chains `∂L/∂E_k` through the cached forward without updating.
    pub fn local_gradients(&mut self, grad: &RoundMessage) -> Result<GradientSet> {
        if grad.direction != Direction::GradientDown || grad.party_id != self.id {
            return Err(Error::Protocol(format!(
                "party {} received {:?} addressed to {}",
                self.id, grad.direction, grad.party_id
            )));
        }
        match self.pending_batch {
            Some(b) if b == grad.batch_index => {}
            Some(b) => {
                return Err(Error::State(format!(
                    "party {}: gradient for batch {} but cached batch {b}",
                    self.id, grad.batch_index
                )))
            }
            None => {
                return Err(Error::State(format!(
                    "party {}: gradient arrived without a cached forward",
                    self.id
                )))
            }
        }
        self.pending_batch = None;
        self.model.backward(&grad.payload)
    }

    /// Masked SGD update from a `GradientDown` message. Returns the local
    /// parameter gradients.
    pub fn passive_backward(&mut self, grad: &RoundMessage, lr: f64) -> Result<GradientSet> {
        let g = self.local_gradients(grad)?;
        self.model.sgd_step(&g.params, lr, self.freeze_mask.as_ref())?;
        Ok(g)
    }

    /// Cache-free embedding. Columns outside `visible` are zeroed.
    pub fn embed(
        &self,
        rows: &[usize],
        features: &PartyFeatures<'_>,
        visible: &[usize],
    ) -> Result<Matrix> {
        let x = features.gather_masked(rows, &self.columns, visible)?;
        self.model.predict(&x)
    }
}

/// Label holder running the server model on summed embeddings.
#[derive(Debug, Clone)]
pub struct ActiveParty {
    server: DenseNet,
    pub weights: LossWeights,
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    class_replay: Option<PrototypeBatch>,
    feature_replay: Option<PrototypeBatch>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: ComposedLoss,
    pub downs: Vec<RoundMessage>,
}

impl ActiveParty {
    pub fn new(server: DenseNet, weights: LossWeights, gamma: f64, beta: f64, lr: f64) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            server,
            weights,
            gamma,
            beta,
            lr,
            class_replay: None,
            feature_replay: None,
        })
    }

    pub fn server(&self) -> &DenseNet {
        &self.server
    }

    pub fn n_outputs(&self) -> usize {
        self.server.output_dim()
    }

    pub fn grow_classes<R: Rng + ?Sized>(&mut self, n_classes: usize, rng: &mut R) -> Result<()> {
        self.server.grow_output(n_classes, rng)
    }

    pub fn set_replay(&mut self, class_replay: Option<PrototypeBatch>, feature_replay: Option<PrototypeBatch>) {
        self.class_replay = class_replay;
        self.feature_replay = feature_replay;
    }

    pub fn class_replay(&self) -> Option<&PrototypeBatch> {
        self.class_replay.as_ref()
    }

    pub fn feature_replay(&self) -> Option<&PrototypeBatch> {
        self.feature_replay.as_ref()
    }

    /// Composite loss on the aggregated batch, SGD on the server, and one
    /// `GradientDown` per party. Under sum aggregation every party receives
    /// the same `∂L/∂E`.
    pub fn active_step(
        &mut self,
        global_emb: &Matrix,
        labels: &[usize],
        parties: &[usize],
        batch_index: usize,
    ) -> Result<StepOutcome> {
        let loss = compose_loss(
            &mut self.server,
            global_emb,
            labels,
            self.class_replay.as_ref(),
            self.feature_replay.as_ref(),
            &self.weights,
        )?;
        self.server.sgd_step(&loss.server_grads, self.lr, None)?;
        let downs = parties
            .iter()
            .map(|&p| RoundMessage {
                direction: Direction::GradientDown,
                party_id: p,
                batch_index,
                payload: loss.embedding_grad.clone(),
            })
            .collect();
        Ok(StepOutcome { loss, downs })
    }

    /// Cross-entropy gradient of a single aggregated sample batch w.r.t. the
    /// embeddings, leaving the server untouched.
    pub fn embedding_gradient(&mut self, global_emb: &Matrix, labels: &[usize]) -> Result<Matrix> {
        let logits = self.server.forward(global_emb)?;
        let (_, dlogits) = crate::tensor::softmax_cross_entropy(&logits, labels)?;
        Ok(self.server.backward(&dlogits)?.input)
    }

    pub fn predict(&self, global_emb: &Matrix) -> Result<Matrix> {
        self.server.predict(global_emb)
    }
}
