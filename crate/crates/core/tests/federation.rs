use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vleto::continual::LossWeights;
use vleto::data::{DataSplit, SyntheticSpec, TaskMode, VerticalDataset};
use vleto::experiment::{run_in_memory, Ablation, DatasetSource, ExperimentConfig};
use vleto::protocol::{aggregate_embeddings, ActiveParty, Direction, Execution, Federation, PassiveParty};
use vleto::rng::{stream_rng, Stream};
use vleto::tensor::{softmax_cross_entropy, DenseNet, Matrix};

fn small(mode: TaskMode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            n_samples: 400,
            n_features: 8,
            n_classes: 4,
            class_separation: 4.0,
        }),
        k_parties: 2,
        mode,
        n_tasks: 2,
        epochs: 3,
        lr: 0.05,
        seed,
        trace_limit: usize::MAX,
        ..ExperimentConfig::default()
    }
}

fn split_for(cfg: &ExperimentConfig, dataset: &VerticalDataset) -> DataSplit {
    DataSplit::stratified(
        dataset.label_view().all(),
        dataset.n_classes(),
        cfg.test_fraction,
        &mut stream_rng(cfg.seed, Stream::Split, 0),
    )
    .unwrap()
}

#[test]
fn every_embedding_is_answered_by_one_matching_gradient() {
    let out = run_in_memory(&small(TaskMode::Cil, 0)).unwrap();
    let mut by_batch: BTreeMap<usize, (Vec<_>, Vec<_>)> = BTreeMap::new();
    for m in &out.trace {
        let entry = by_batch.entry(m.batch_index).or_default();
        match m.direction {
            Direction::EmbeddingUp => entry.0.push(m),
            Direction::GradientDown => entry.1.push(m),
        }
    }
    assert!(!by_batch.is_empty());
    for (batch, (ups, downs)) in by_batch {
        let mut up_ids: Vec<usize> = ups.iter().map(|m| m.party_id).collect();
        let mut down_ids: Vec<usize> = downs.iter().map(|m| m.party_id).collect();
        up_ids.sort_unstable();
        down_ids.sort_unstable();
        assert_eq!(up_ids, vec![0, 1], "batch {batch}");
        assert_eq!(up_ids, down_ids, "batch {batch}");
        for up in &ups {
            let down = downs.iter().find(|d| d.party_id == up.party_id).unwrap();
            assert_eq!(up.payload.shape(), down.payload.shape());
            assert_eq!(up.payload.cols(), 16);
        }
        // Sum aggregation hands every party the same gradient.
        assert_eq!(downs[0].payload, downs[1].payload);
    }
}

#[test]
fn trace_limit_caps_recorded_messages() {
    let cfg = ExperimentConfig { trace_limit: 7, ..small(TaskMode::Cil, 0) };
    assert_eq!(run_in_memory(&cfg).unwrap().trace.len(), 7);
}

#[test]
fn passive_computation_ignores_labels() {
    // Two datasets that differ only in their labels must look identical to
    // a passive party.
    let cfg = small(TaskMode::Cil, 3);
    let a = cfg.load_dataset().unwrap();
    let mut shuffled = a.label_view().all().to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let b = VerticalDataset::new(a.all_features().clone(), shuffled, a.partition().clone(), a.n_classes()).unwrap();
    assert_ne!(a.label_view().all(), b.label_view().all());

    let block = a.partition().block(1).to_vec();
    let model = DenseNet::mlp(&[block.len(), 8, 4], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let rows: Vec<usize> = (0..32).collect();
    let mut pa = PassiveParty::new(1, model.clone(), block.clone()).unwrap();
    let mut pb = PassiveParty::new(1, model, block).unwrap();
    let ua = pa.passive_forward(0, &rows, &a.party_view(1).unwrap()).unwrap();
    let ub = pb.passive_forward(0, &rows, &b.party_view(1).unwrap()).unwrap();
    assert_eq!(ua.payload, ub.payload);
}

#[test]
fn parties_cannot_read_foreign_columns() {
    let cfg = small(TaskMode::Cil, 0);
    let ds = cfg.load_dataset().unwrap();
    let view = ds.party_view(0).unwrap();
    let foreign = ds.partition().block(1).to_vec();
    assert!(view.gather(&[0, 1], &foreign).is_err());
}

#[test]
fn same_seed_same_metrics() {
    let cfg = small(TaskMode::Fil, 11);
    let a = run_in_memory(&cfg).unwrap();
    let b = run_in_memory(&cfg).unwrap();
    assert_eq!(a.metrics.iter().map(|m| (m.evaluations.clone(), m.aggregate.clone())).collect::<Vec<_>>(),
               b.metrics.iter().map(|m| (m.evaluations.clone(), m.aggregate.clone())).collect::<Vec<_>>());
    assert_eq!(a.prototypes, b.prototypes);
}

#[test]
fn concurrent_and_sequential_are_bit_identical() {
    for mode in [TaskMode::Cil, TaskMode::Fil] {
        let seq = run_in_memory(&small(mode, 5)).unwrap();
        let par = run_in_memory(&ExperimentConfig { execution: Execution::Concurrent, ..small(mode, 5) }).unwrap();
        for (s, p) in seq.metrics.iter().zip(&par.metrics) {
            assert_eq!(s.evaluations, p.evaluations);
            assert_eq!(s.train_loss.to_bits(), p.train_loss.to_bits());
        }
        assert_eq!(seq.prototypes, par.prototypes);
        assert_eq!(seq.trace, par.trace);
    }
}

#[test]
fn cil_keeps_old_logits_and_evaluates_first_task() {
    let cfg = small(TaskMode::Cil, 1);
    let dataset = cfg.load_dataset().unwrap();
    let schedule = cfg.schedule(&dataset).unwrap();
    let mut fed = Federation::new(&dataset, split_for(&cfg, &dataset), &schedule.tasks()[0], cfg.federation_config()).unwrap();
    fed.run_task(&schedule.tasks()[0]).unwrap();
    let last = fed.active().server().layers().len() - 1;
    let old_w = fed.active().server().layers()[last].weight.data().to_vec();
    let old_cols = fed.active().n_outputs();

    // Growth alone must leave old-class columns bit-equal.
    let mut active = fed.active().clone();
    active.grow_classes(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grown = active.server().layers()[last].weight.data();
    let rows = old_w.len() / old_cols;
    for r in 0..rows {
        for c in 0..old_cols {
            assert_eq!(grown[r * 4 + c].to_bits(), old_w[r * old_cols + c].to_bits());
        }
    }

    let m = fed.run_task(&schedule.tasks()[1]).unwrap();
    assert_eq!(fed.active().n_outputs(), 4);
    assert_eq!(m.evaluations.len(), 2);
    assert!(m.accuracy_on(0).is_some());
}

#[test]
fn fil_growth_keeps_frozen_rows_in_place() {
    let cfg = small(TaskMode::Fil, 2);
    let dataset = cfg.load_dataset().unwrap();
    let schedule = cfg.schedule(&dataset).unwrap();
    let mut fed = Federation::new(&dataset, split_for(&cfg, &dataset), &schedule.tasks()[0], cfg.federation_config()).unwrap();
    fed.run_task(&schedule.tasks()[0]).unwrap();
    let before: Vec<(Vec<f64>, Vec<bool>, usize)> = fed
        .parties()
        .iter()
        .map(|p| {
            let mask = p.freeze_mask().unwrap().tensor(0).values.clone();
            (p.model().layers()[0].weight.data().to_vec(), mask, p.columns().len())
        })
        .collect();
    fed.run_task(&schedule.tasks()[1]).unwrap();
    let mut frozen = 0;
    for (p, (w0, mask, old_in)) in fed.parties().iter().zip(&before) {
        assert!(p.columns().len() > *old_in);
        assert_eq!(p.freeze_mask().unwrap().shapes(), p.model().param_shapes());
        // New input rows are appended, so old entries keep their index.
        let now = p.model().layers()[0].weight.data();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                frozen += 1;
                assert_eq!(now[i].to_bits(), w0[i].to_bits());
            }
        }
    }
    assert!(frozen > 0);
}

/// Trains a single network on the concatenated features with the same
/// batches and learning rate.
fn monolithic_accuracy(cfg: &ExperimentConfig) -> f64 {
    let dataset = cfg.load_dataset().unwrap();
    let split = split_for(cfg, &dataset);
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.n_samples()).partition(|&i| !split.is_test(i));
    let x = dataset.all_features();
    let labels = dataset.label_view();
    let mut dims = vec![dataset.n_features()];
    dims.extend(&cfg.local_hidden);
    dims.push(cfg.d_emb);
    dims.extend(&cfg.server_hidden);
    dims.push(dataset.n_classes());
    let mut net = DenseNet::mlp(&dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let logits = net.forward(&x.select_rows(rows)).unwrap();
            let (_, d) = softmax_cross_entropy(&logits, &labels.gather(rows)).unwrap();
            let g = net.backward(&d).unwrap();
            net.sgd_step(&g.params, cfg.lr, None).unwrap();
        }
    }
    let pred = net.predict(&x.select_rows(&test)).unwrap().argmax_rows();
    let truth = labels.gather(&test);
    pred.iter().zip(&truth).filter(|(p, y)| p == y).count() as f64 / test.len() as f64
}

#[test]
fn single_task_matches_monolithic_model() {
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                n_samples: 2000,
                n_features: 16,
                n_classes: 4,
                class_separation: 4.0,
            }),
            n_tasks: 1,
            epochs: 30,
            lr: 0.05,
            ablation: Ablation::NAIVE,
            seed,
            ..ExperimentConfig::default()
        };
        let vfl = run_in_memory(&cfg).unwrap().metrics[0].current_accuracy();
        gaps.push((vfl - monolithic_accuracy(&cfg)).abs());
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean_gap <= 0.01, "gaps {gaps:?}");
}

#[test]
fn composite_loss_falls_on_separable_batch() {
    let cfg = small(TaskMode::Cil, 4);
    let dataset = cfg.load_dataset().unwrap();
    let rows: Vec<usize> = dataset
        .label_view()
        .all()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y < 2)
        .map(|(i, _)| i)
        .take(32)
        .collect();
    let labels = dataset.label_view().gather(&rows);
    let mut parties: Vec<PassiveParty> = (0..2)
        .map(|k| {
            let block = dataset.partition().block(k).to_vec();
            let net = DenseNet::mlp(&[block.len(), 8, 6], &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
            PassiveParty::new(k, net, block).unwrap()
        })
        .collect();
    let server = DenseNet::mlp(&[6, 8, 2], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut active = ActiveParty::new(server, LossWeights::default(), 0.1, 0.5, 0.05).unwrap();
    let mut losses = Vec::new();
    for step in 0..50 {
        let ups: Vec<_> = parties
            .iter_mut()
            .map(|p| p.passive_forward(step, &rows, &dataset.party_view(p.id()).unwrap()).unwrap())
            .collect();
        let emb = aggregate_embeddings(&ups, &[0, 1]).unwrap();
        let out = active.active_step(&emb, &labels, &[0, 1], step).unwrap();
        losses.push(out.loss.total);
        for p in &mut parties {
            p.passive_backward(&out.downs[p.id()], 0.05).unwrap();
        }
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn gradient_without_forward_is_a_state_error() {
    let cfg = small(TaskMode::Cil, 0);
    let dataset = cfg.load_dataset().unwrap();
    let block = dataset.partition().block(0).to_vec();
    let net = DenseNet::mlp(&[block.len(), 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut p = PassiveParty::new(0, net, block).unwrap();
    let msg = vleto::protocol::RoundMessage {
        direction: Direction::GradientDown,
        party_id: 0,
        batch_index: 0,
        payload: Matrix::zeros(1, 4),
    };
    assert!(matches!(p.passive_backward(&msg, 0.1), Err(vleto::Error::State(_))));
}
