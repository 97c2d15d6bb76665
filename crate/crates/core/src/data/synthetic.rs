use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{partition_vertically, VerticalDataset};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub class_separation: f64,
}

/// Gaussian class blobs. Each class mean is a uniform direction on the
/// sphere of radius `class_separation`; features add unit-variance noise.
/// Sample `i` belongs to class `i % n_classes`. The returned dataset has a
/// single-party partition; repartition with
/// [`VerticalDataset::with_partition`].
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<VerticalDataset> {
    let SyntheticSpec {
        n_samples,
        n_features,
        n_classes,
        class_separation,
    } = *spec;
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(Error::config("dataset", "sample, feature and class counts must be >= 1"));
    }
    if !(class_separation >= 0.0 && class_separation.is_finite()) {
        return Err(Error::config("dataset.class_separation", "must be finite and >= 0"));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| random_direction(n_features, &mut rng))
        .map(|d| d.into_iter().map(|v| v * class_separation).collect())
        .collect();
    let mut data = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let y = i % n_classes;
        labels.push(y);
        for &mu in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + noise);
        }
    }
    let features = Matrix::from_vec(n_samples, n_features, data)?;
    VerticalDataset::new(
        features,
        labels,
        partition_vertically(n_features, 1)?,
        n_classes,
    )
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
