use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{map_items, map_refs, Execution};
use super::message::{aggregate_embeddings, RoundMessage};
use super::party::{ActiveParty, PassiveParty};
use crate::continual::{freeze_from_fisher, FisherAccumulator, FisherInfo, FreezePolicy, LossWeights, ThresholdScope};
use crate::data::{DataSplit, TaskDescriptor, TaskView, VerticalDataset};
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, TaskMetrics};
use crate::prototype::{
    evolve_with_shift, fuse_feature_prototype, generate_prototypes, make_prototype_batch, mean_drift,
    GlobalPrototypeList, Prototype, PrototypeRecord,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{softmax_cross_entropy, DenseNet, FreezeMask, Matrix};

/// Local model optimisation: Fisher-threshold freezing at passive parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmoConfig {
    pub enabled: bool,
    pub k0: f64,
    pub alpha: f64,
    pub scope: ThresholdScope,
    /// Upper bound on the fraction of frozen local parameters.
    pub max_frozen_fraction: f64,
    /// Threshold the elementwise max of all past Fisher estimates instead
    /// of the latest one.
    pub accumulate: bool,
    /// Cap on per-sample gradients used for each estimate.
    pub fisher_max_samples: Option<usize>,
}

impl Default for LmoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k0: 15.0,
            alpha: 3.0,
            scope: ThresholdScope::Model,
            max_frozen_fraction: 0.9,
            accumulate: false,
            fisher_max_samples: None,
        }
    }
}

/// Everything the orchestrator needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub d_emb: usize,
    pub local_hidden: Vec<usize>,
    pub server_hidden: Vec<usize>,
    pub lr: f64,
    pub weights: LossWeights,
    pub gamma: f64,
    pub beta: f64,
    pub jitter_sigma: f64,
    pub lmo: LmoConfig,
    pub execution: Execution,
    pub seed: u64,
    /// Maximum number of messages kept for the trace dump (0 disables).
    pub trace_limit: usize,
}

/// Fisher estimate and resulting mask of one party after one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherDump {
    pub party_id: usize,
    pub task_id: usize,
    pub delta: f64,
    pub kappa: Vec<f64>,
    pub saturated: bool,
    pub released_by_cap: usize,
    pub frozen: usize,
    pub total: usize,
    pub fisher: FisherInfo,
    pub mask: FreezeMask,
}

/// One active party, `K` passive parties and the global prototype list,
/// driven task by task.
pub struct Federation<'d> {
    dataset: &'d VerticalDataset,
    split: DataSplit,
    config: FederationConfig,
    parties: Vec<PassiveParty>,
    party_ids: Vec<usize>,
    active: ActiveParty,
    prototypes: GlobalPrototypeList,
    completed: Vec<TaskDescriptor>,
    step: usize,
    shuffle_rng: ChaCha8Rng,
    resize_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    trace: Vec<RoundMessage>,
    exports: Vec<PrototypeRecord>,
    fisher_dumps: Vec<FisherDump>,
}

impl<'d> Federation<'d> {
    /// Builds parties sized for `first_task`.
    pub fn new(
        dataset: &'d VerticalDataset,
        split: DataSplit,
        first_task: &TaskDescriptor,
        config: FederationConfig,
    ) -> Result<Self> {
        if config.d_emb == 0 {
            return Err(Error::config("d_emb", "must be at least 1"));
        }
        let k = dataset.partition().n_parties();
        if first_task.feature_view.len() != k {
            return Err(Error::config("schedule", "feature views do not match party count"));
        }
        let parties = (0..k)
            .map(|id| {
                let view = first_task.feature_view[id].clone();
                let mut dims = vec![view.len()];
                dims.extend(&config.local_hidden);
                dims.push(config.d_emb);
                let mut rng = stream_rng(config.seed, Stream::PartyInit, id as u64);
                PassiveParty::new(id, DenseNet::mlp(&dims, &mut rng)?, view)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_out = first_task.class_set.iter().max().map_or(1, |m| m + 1);
        let mut dims = vec![config.d_emb];
        dims.extend(&config.server_hidden);
        dims.push(n_out);
        let server = DenseNet::mlp(&dims, &mut stream_rng(config.seed, Stream::ServerInit, 0))?;
        let active = ActiveParty::new(server, config.weights, config.gamma, config.beta, config.lr)?;
        Ok(Self {
            dataset,
            split,
            parties,
            party_ids: (0..k).collect(),
            active,
            prototypes: GlobalPrototypeList::new(),
            completed: Vec::new(),
            step: 0,
            shuffle_rng: stream_rng(config.seed, Stream::Shuffle, 0),
            resize_rng: stream_rng(config.seed, Stream::Resize, 0),
            jitter_rng: stream_rng(config.seed, Stream::Jitter, 0),
            trace: Vec::new(),
            exports: Vec::new(),
            fisher_dumps: Vec::new(),
            config,
        })
    }

    pub fn parties(&self) -> &[PassiveParty] {
        &self.parties
    }

    pub fn active(&self) -> &ActiveParty {
        &self.active
    }

    pub fn prototypes(&self) -> &GlobalPrototypeList {
        &self.prototypes
    }

    pub fn trace(&self) -> &[RoundMessage] {
        &self.trace
    }

    pub fn prototype_exports(&self) -> &[PrototypeRecord] {
        &self.exports
    }

    pub fn fisher_dumps(&self) -> &[FisherDump] {
        &self.fisher_dumps
    }

    fn record(&mut self, msgs: &[RoundMessage]) {
        let room = self.config.trace_limit.saturating_sub(self.trace.len());
        self.trace.extend(msgs.iter().take(room).cloned());
    }

    /// Sum of local embeddings for `rows`, with each party seeing only
    /// `views[party]` (other model columns zeroed).
    pub fn global_embeddings(&self, rows: &[usize], views: &[Vec<usize>]) -> Result<Matrix> {
        let dataset = self.dataset;
        let parts = map_refs(&self.parties, self.config.execution, |p| {
            p.embed(rows, &dataset.party_view(p.id())?, &views[p.id()])
        })?;
        let mut sum = Matrix::zeros(rows.len(), self.config.d_emb);
        for part in &parts {
            sum.add_assign(part)?;
        }
        Ok(sum)
    }

    fn resize_for(&mut self, task: &TaskDescriptor) -> Result<()> {
        for (party, view) in self.parties.iter_mut().zip(&task.feature_view) {
            party.extend_view(view, &mut self.resize_rng)?;
        }
        let seen_max = self
            .completed
            .iter()
            .chain(std::iter::once(task))
            .flat_map(|t| t.class_set.iter().copied())
            .max()
            .unwrap_or(0);
        if seen_max + 1 > self.active.n_outputs() {
            self.active.grow_classes(seen_max + 1, &mut self.resize_rng)?;
        }
        Ok(())
    }

    /// Rebuilds the replay batches from the global list and fresh
    /// prototypes of the current task computed with the current models.
    fn refresh_replay(&mut self, view: &TaskView<'_>, warned: &mut bool) -> Result<()> {
        let task = view.task();
        if self.prototypes.is_empty() {
            self.active.set_replay(None, None);
            return Ok(());
        }
        let weights = self.config.weights;
        let old: Vec<usize> = self
            .prototypes
            .classes()
            .into_iter()
            .filter(|c| !task.has_class(*c))
            .collect();
        let shared: Vec<usize> = task
            .class_set
            .iter()
            .copied()
            .filter(|c| self.prototypes.contains(*c))
            .collect();
        let want_a = weights.lambda_a > 0.0 && !old.is_empty();
        let want_f = weights.lambda_f > 0.0 && !shared.is_empty();
        if !want_a && !want_f {
            self.active.set_replay(None, None);
            return Ok(());
        }

        let fresh: BTreeMap<usize, Prototype> = {
            let rows = view.train_rows();
            let emb = self.global_embeddings(rows, &task.feature_view)?;
            let labels = self.dataset.label_view().gather(rows);
            let present: Vec<usize> = task
                .class_set
                .iter()
                .copied()
                .filter(|c| labels.contains(c))
                .collect();
            generate_prototypes(&emb, &labels, &present, task.task_id)?
                .into_iter()
                .map(|p| (p.class_id, p))
                .collect()
        };

        let class_batch = if want_a {
            let pairs: Vec<(&[f64], &[f64])> = fresh
                .values()
                .filter_map(|now| {
                    let before = self
                        .prototypes
                        .previous(now.class_id)
                        .or_else(|| self.prototypes.get(now.class_id))?;
                    let nonzero = |v: &[f64]| v.iter().any(|x| *x != 0.0);
                    (nonzero(before.values()) && nonzero(now.values()))
                        .then(|| (before.values(), now.values()))
                })
                .collect();
            let shift = match mean_drift(&pairs)? {
                Some(d) => self.config.gamma * d,
                None => {
                    if !*warned {
                        log::warn!(
                            "task {}: no class spans consecutive tasks, replaying stored prototypes without drift",
                            task.task_id
                        );
                        *warned = true;
                    }
                    0.0
                }
            };
            let evolved: Vec<Prototype> = old
                .iter()
                .map(|&c| evolve_with_shift(self.prototypes.get(c).expect("listed"), shift, task.task_id))
                .collect();
            Some(make_prototype_batch(
                &evolved,
                task.batch_size,
                self.config.jitter_sigma,
                &mut self.jitter_rng,
            )?)
        } else {
            None
        };

        let feature_batch = if want_f {
            let fused = shared
                .iter()
                .filter_map(|c| fresh.get(c))
                .map(|p| fuse_feature_prototype(p, &self.prototypes, self.config.beta))
                .collect::<Result<Vec<_>>>()?;
            if fused.is_empty() {
                None
            } else {
                Some(make_prototype_batch(
                    &fused,
                    task.batch_size,
                    self.config.jitter_sigma,
                    &mut self.jitter_rng,
                )?)
            }
        } else {
            None
        };
        self.active.set_replay(class_batch, feature_batch);
        Ok(())
    }

    /// One synchronous step: K forwards, barrier + aggregation, server
    /// step, K masked backwards. Returns the composite loss.
    fn train_step(&mut self, rows: &[usize]) -> Result<f64> {
        let batch_index = self.step;
        self.step += 1;
        let dataset = self.dataset;
        let ups = map_items(&mut self.parties, self.config.execution, |p| {
            p.passive_forward(batch_index, rows, &dataset.party_view(p.id())?)
        })?;
        self.record(&ups);
        let emb = aggregate_embeddings(&ups, &self.party_ids)?;
        let labels = dataset.label_view().gather(rows);
        let outcome = self
            .active
            .active_step(&emb, &labels, &self.party_ids, batch_index)?;
        self.record(&outcome.downs);
        let lr = self.config.lr;
        let downs = &outcome.downs;
        map_items(&mut self.parties, self.config.execution, |p| {
            p.passive_backward(&downs[p.id()], lr).map(|_| ())
        })?;
        Ok(outcome.loss.total)
    }

    /// Trains on `task`, then runs prototype generation/evolution, Fisher
    /// estimation and mask refresh, and evaluates on every seen task.
    pub fn run_task(&mut self, task: &TaskDescriptor) -> Result<TaskMetrics> {
        let start = Instant::now();
        if task.task_id != self.completed.len() {
            return Err(Error::State(format!(
                "expected task {}, got {}",
                self.completed.len(),
                task.task_id
            )));
        }
        self.resize_for(task)?;
        let dataset = self.dataset;
        let split = self.split.clone();
        let view = TaskView::new(dataset, &split, task)?;
        if view.train_rows().is_empty() {
            return Err(Error::MissingClass(task.class_set.clone()));
        }

        let mut warned = false;
        let mut last_epoch_loss = 0.0;
        for _epoch in 0..task.epochs {
            self.refresh_replay(&view, &mut warned)?;
            let batches = view.epoch_batches(&mut self.shuffle_rng);
            let mut sum = 0.0;
            for rows in &batches {
                let loss = self.train_step(rows)?;
                sum += loss;
            }
            last_epoch_loss = sum / batches.len() as f64;
            if !last_epoch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "task {} training loss became {last_epoch_loss}",
                    task.task_id
                )));
            }
        }
        self.active.set_replay(None, None);

        self.update_prototypes(&view)?;
        if self.config.lmo.enabled {
            self.refresh_masks(&view)?;
        }
        self.completed.push(task.clone());

        let (evaluations, aggregate) = self.evaluate()?;
        Ok(TaskMetrics {
            task_id: task.task_id,
            evaluations,
            aggregate,
            train_loss: last_epoch_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn update_prototypes(&mut self, view: &TaskView<'_>) -> Result<()> {
        let task = view.task();
        let rows = view.train_rows();
        let emb = self.global_embeddings(rows, &task.feature_view)?;
        let labels = self.dataset.label_view().gather(rows);
        let present: Vec<usize> = task
            .class_set
            .iter()
            .copied()
            .filter(|c| labels.contains(c))
            .collect();
        let raw = generate_prototypes(&emb, &labels, &present, task.task_id)?;
        let fused = raw
            .iter()
            .map(|p| fuse_feature_prototype(p, &self.prototypes, self.config.beta))
            .collect::<Result<Vec<_>>>()?;
        self.prototypes.update(&fused, &raw);
        self.exports.extend(self.prototypes.iter().map(|p| PrototypeRecord {
            class_id: p.class_id,
            task_id: task.task_id,
            vector: p.values().to_vec(),
        }));
        Ok(())
    }

    /// Per-sample squared gradients of the cross-entropy, chained through
    /// the server to each local model, then thresholded into masks.
    fn refresh_masks(&mut self, view: &TaskView<'_>) -> Result<()> {
        let task = view.task();
        let mut rows = view.train_rows().to_vec();
        if let Some(cap) = self.config.lmo.fisher_max_samples {
            rows.truncate(cap.max(1));
        }
        let labels = self.dataset.label_view().gather(&rows);
        let emb = self.global_embeddings(&rows, &task.feature_view)?;
        // Batch-mean CE gradient; row i times N is sample i's own gradient.
        let n = rows.len() as f64;
        let mut per_sample = self.active.embedding_gradient(&emb, &labels)?;
        per_sample.scale(n);

        let dataset = self.dataset;
        let lmo = self.config.lmo.clone();
        let task_id = task.task_id;
        let dumps = map_items(&mut self.parties, self.config.execution, |p| {
            let features = dataset.party_view(p.id())?;
            let mut acc = FisherAccumulator::new(&p.model().param_shapes());
            for (i, &row) in rows.iter().enumerate() {
                let up = p.passive_forward(usize::MAX, &[row], &features)?;
                let down = RoundMessage {
                    direction: super::Direction::GradientDown,
                    party_id: p.id(),
                    batch_index: up.batch_index,
                    payload: Matrix::row_vector(per_sample.row(i)),
                };
                let g = p.local_gradients(&down)?;
                acc.add(&g.params)?;
            }
            let mut fisher = acc.finish()?;
            if lmo.accumulate {
                if let Some(prev) = p.fisher() {
                    fisher.max_with(prev)?;
                }
            }
            let policy = FreezePolicy {
                k0: lmo.k0,
                alpha: lmo.alpha,
                task_index: task_id,
            };
            let outcome = freeze_from_fisher(&fisher, &policy, lmo.scope, lmo.max_frozen_fraction)?;
            p.set_fisher(fisher.clone())?;
            p.set_freeze_mask(Some(outcome.mask.clone()))?;
            Ok(FisherDump {
                party_id: p.id(),
                task_id,
                delta: outcome.delta,
                kappa: outcome.kappa,
                saturated: outcome.saturated,
                released_by_cap: outcome.released_by_cap,
                frozen: outcome.mask.count_true(),
                total: outcome.mask.len(),
                fisher,
                mask: outcome.mask,
            })
        })?;
        self.fisher_dumps.extend(dumps);
        Ok(())
    }

    /// Accuracy and loss on each completed task's held-out split (each with
    /// its own feature view), plus the pooled aggregate.
    pub fn evaluate(&self) -> Result<(Vec<EvalResult>, EvalResult)> {
        let mut results = Vec::with_capacity(self.completed.len());
        let (mut correct, mut loss_sum, mut total) = (0usize, 0.0, 0usize);
        for task in &self.completed {
            let view = TaskView::new(self.dataset, &self.split, task)?;
            let rows = view.test_rows();
            let r = self.evaluate_rows(task.task_id, rows, &task.feature_view)?;
            correct += r.correct;
            loss_sum += r.loss * r.n as f64;
            total += r.n;
            results.push(r);
        }
        let aggregate = EvalResult {
            eval_task: None,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            loss: if total == 0 { 0.0 } else { loss_sum / total as f64 },
            correct,
            n: total,
        };
        Ok((results, aggregate))
    }

    fn evaluate_rows(&self, task_id: usize, rows: &[usize], views: &[Vec<usize>]) -> Result<EvalResult> {
        if rows.is_empty() {
            return Ok(EvalResult {
                eval_task: Some(task_id),
                accuracy: 0.0,
                loss: 0.0,
                correct: 0,
                n: 0,
            });
        }
        let emb = self.global_embeddings(rows, views)?;
        let logits = self.active.predict(&emb)?;
        let labels = self.dataset.label_view().gather(rows);
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        let correct = logits
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(EvalResult {
            eval_task: Some(task_id),
            accuracy: correct as f64 / rows.len() as f64,
            loss,
            correct,
            n: rows.len(),
        })
    }
}
