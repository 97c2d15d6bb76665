use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vleto::continual::{
    compose_loss, estimate_fisher, freeze_from_fisher, FisherInfo, FreezePolicy, LossWeights, ThresholdScope,
};
use vleto::prototype::PrototypeBatch;
use vleto::tensor::{softmax_cross_entropy, DenseNet, Matrix, ParamBuffer, ParamTensor};

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn setup(seed: u64) -> (DenseNet, Matrix, Vec<usize>, PrototypeBatch, PrototypeBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::mlp(&[5, 7, 3], &mut rng).unwrap();
    for b in net.param_tensor_mut(1) {
        *b = rng.random_range(-0.5..0.5);
    }
    let emb = random_matrix(6, 5, &mut rng);
    let labels = (0..6).map(|_| rng.random_range(0..3)).collect();
    let a = PrototypeBatch { vectors: random_matrix(4, 5, &mut rng), labels: vec![0, 1, 0, 1] };
    let f = PrototypeBatch { vectors: random_matrix(3, 5, &mut rng), labels: vec![2, 2, 1] };
    (net, emb, labels, a, f)
}

fn ce(net: &DenseNet, x: &Matrix, y: &[usize]) -> f64 {
    softmax_cross_entropy(&net.predict(x).unwrap(), y).unwrap().0
}

#[test]
fn total_is_the_weighted_sum_of_batch_means() {
    let (mut net, emb, labels, a, f) = setup(1);
    let w = LossWeights { lambda_ce: 0.3, lambda_a: 0.5, lambda_f: 0.2 };
    let out = compose_loss(&mut net, &emb, &labels, Some(&a), Some(&f), &w).unwrap();
    let oracle = 0.3 * ce(&net, &emb, &labels) + 0.5 * ce(&net, &a.vectors, &a.labels) + 0.2 * ce(&net, &f.vectors, &f.labels);
    assert!((out.total - oracle).abs() < 1e-12);
    assert!(out.class_replay.is_some() && out.feature_replay.is_some());
}

#[test]
fn server_gradient_matches_finite_differences() {
    let (mut net, emb, labels, a, f) = setup(2);
    let w = LossWeights { lambda_ce: 0.5, lambda_a: 0.7, lambda_f: 0.4 };
    let out = compose_loss(&mut net, &emb, &labels, Some(&a), Some(&f), &w).unwrap();
    let total = |n: &DenseNet| {
        w.lambda_ce * ce(n, &emb, &labels) + w.lambda_a * ce(n, &a.vectors, &a.labels) + w.lambda_f * ce(n, &f.vectors, &f.labels)
    };
    let h = 1e-6;
    for t in 0..net.param_shapes().len() {
        for j in 0..out.server_grads.tensor(t).values.len() {
            let orig = net.param_tensor_mut(t)[j];
            net.param_tensor_mut(t)[j] = orig + h;
            let up = total(&net);
            net.param_tensor_mut(t)[j] = orig - h;
            let down = total(&net);
            net.param_tensor_mut(t)[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = out.server_grads.tensor(t).values[j];
            assert!((numeric - analytic).abs() < 1e-7, "tensor {t} entry {j}: {analytic} vs {numeric}");
        }
    }
    // Only the real-data term reaches the embeddings.
    for j in 0..emb.data().len() {
        let mut p = emb.clone();
        p.data_mut()[j] += h;
        let mut m = emb.clone();
        m.data_mut()[j] -= h;
        let numeric = w.lambda_ce * (ce(&net, &p, &labels) - ce(&net, &m, &labels)) / (2.0 * h);
        assert!((numeric - out.embedding_grad.data()[j]).abs() < 1e-7);
    }
}

#[test]
fn zero_weight_terms_are_skipped() {
    let (mut net, emb, labels, a, f) = setup(3);
    let plain = LossWeights { lambda_ce: 1.0, lambda_a: 0.0, lambda_f: 0.0 };
    let with = compose_loss(&mut net, &emb, &labels, Some(&a), Some(&f), &plain).unwrap();
    let without = compose_loss(&mut net, &emb, &labels, None, None, &plain).unwrap();
    assert_eq!(with.total, without.total);
    assert_eq!(with.server_grads, without.server_grads);
    assert!(with.class_replay.is_none() && with.feature_replay.is_none());
}

#[test]
fn replaying_the_real_batch_adds_its_weight() {
    // CE term and a replay of the very same batch: total = (λ_CE + λ_A)·CE.
    let (mut net, emb, labels, _, _) = setup(4);
    let same = PrototypeBatch { vectors: emb.clone(), labels: labels.clone() };
    let w = LossWeights { lambda_ce: 0.5, lambda_a: 0.5, lambda_f: 0.0 };
    let out = compose_loss(&mut net, &emb, &labels, Some(&same), None, &w).unwrap();
    let single = compose_loss(&mut net, &emb, &labels, None, None, &LossWeights { lambda_ce: 1.0, lambda_a: 0.0, lambda_f: 0.0 }).unwrap();
    assert!((out.total - single.total).abs() < 1e-12);
    for (x, y) in out.server_grads.iter().zip(single.server_grads.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn fisher_is_mean_of_squared_per_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = DenseNet::mlp(&[3, 4, 2], &mut rng).unwrap();
    let x = random_matrix(5, 3, &mut rng);
    let labels = [0, 1, 1, 0, 1];
    let mut samples = Vec::new();
    for i in 0..5 {
        let logits = net.forward(&x.select_rows(&[i])).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &labels[i..=i]).unwrap();
        samples.push(net.backward(&d).unwrap().params);
    }
    let fisher = estimate_fisher(&net.param_shapes(), &samples).unwrap();
    assert_eq!(fisher.sample_count, 5);
    let flat: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().copied().collect()).collect();
    for (k, v) in fisher.values.iter().enumerate() {
        let oracle = flat.iter().map(|g| g[k] * g[k]).sum::<f64>() / 5.0;
        assert!((v - oracle).abs() < 1e-15);
    }
}

fn fisher_from(values: Vec<f64>, rows: usize) -> FisherInfo {
    let cols = values.len() / rows;
    FisherInfo {
        values: ParamBuffer::from_tensors(vec![ParamTensor { rows, cols, values }]).unwrap(),
        sample_count: 1,
    }
}

proptest! {
    #[test]
    fn larger_delta_never_unfreezes(
        values in prop::collection::vec(0.0f64..10.0, 1..40),
        d1 in -5.0f64..20.0,
        extra in 0.0f64..10.0,
    ) {
        let f = fisher_from(values.clone(), 1);
        let lo = freeze_from_fisher(&f, &FreezePolicy { k0: d1, alpha: 0.0, task_index: 0 }, ThresholdScope::Model, 1.0).unwrap();
        let hi = freeze_from_fisher(&f, &FreezePolicy { k0: d1 + extra, alpha: 0.0, task_index: 0 }, ThresholdScope::Model, 1.0).unwrap();
        for (a, b) in lo.mask.iter().zip(hi.mask.iter()) {
            prop_assert!(!a || *b);
        }
    }

    #[test]
    fn cap_bounds_frozen_fraction_and_keeps_highest(
        values in prop::collection::vec(0.0f64..10.0, 1..60),
        frac in 0.0f64..1.0,
    ) {
        let f = fisher_from(values.clone(), 1);
        let out = freeze_from_fisher(&f, &FreezePolicy { k0: 50.0, alpha: 0.0, task_index: 0 }, ThresholdScope::Model, frac).unwrap();
        let n = values.len();
        let frozen = out.mask.count_true();
        prop_assert!(frozen <= (frac * n as f64).floor() as usize);
        // Every frozen entry has Fisher at least as large as every free one.
        let flags: Vec<bool> = out.mask.iter().copied().collect();
        let min_frozen = values.iter().zip(&flags).filter(|(_, m)| **m).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let max_free = values.iter().zip(&flags).filter(|(_, m)| !**m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(frozen == 0 || frozen == n || min_frozen >= max_free);
    }

    #[test]
    fn delta_grows_with_task_index(k0 in 0.0f64..20.0, alpha in 0.0f64..5.0, t in 0usize..50) {
        let a = FreezePolicy { k0, alpha, task_index: t }.delta();
        let b = FreezePolicy { k0, alpha, task_index: t + 1 }.delta();
        prop_assert!(b >= a);
        prop_assert_eq!(FreezePolicy { k0, alpha, task_index: 0 }.delta(), k0);
    }
}
