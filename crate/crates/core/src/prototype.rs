//! Class prototypes over global embeddings: generation, class-incremental
//! evolution, feature-incremental fusion and the cross-task global list.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    /// 1 × d_emb.
    pub vector: Matrix,
    pub source_task: usize,
}

impl Prototype {
    pub fn new(class_id: usize, vector: Vec<f64>, source_task: usize) -> Self {
        Self {
            class_id,
            vector: Matrix::row_vector(&vector),
            source_task,
        }
    }

    pub fn values(&self) -> &[f64] {
        self.vector.data()
    }

    pub fn dim(&self) -> usize {
        self.vector.cols()
    }
}

/// Replayable prototype rows with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBatch {
    pub vectors: Matrix,
    pub labels: Vec<usize>,
}

/// Per-class mean of the rows of `embeddings`. Every class in `classes`
/// must have at least one sample.
pub fn generate_prototypes(
    embeddings: &Matrix,
    labels: &[usize],
    classes: &[usize],
    task: usize,
) -> Result<Vec<Prototype>> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    let d = embeddings.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> =
        classes.iter().map(|&c| (c, (vec![0.0; d], 0))).collect();
    for (r, y) in labels.iter().enumerate() {
        if let Some((sum, n)) = sums.get_mut(y) {
            for (s, v) in sum.iter_mut().zip(embeddings.row(r)) {
                *s += v;
            }
            *n += 1;
        }
    }
    let missing: Vec<usize> = sums
        .iter()
        .filter(|(_, (_, n))| *n == 0)
        .map(|(&c, _)| c)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClass(missing));
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| {
            Prototype::new(c, sum.into_iter().map(|s| s / n as f64).collect(), task)
        })
        .collect())
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`. Zero vectors are rejected.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} vs {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity over `(earlier, later)` prototype pairs; `None`
/// when there are no pairs.
pub fn mean_drift(pairs: &[(&[f64], &[f64])]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += cosine_sim(a, b)?;
    }
    Ok(Some(sum / pairs.len() as f64))
}

/// Approximates a previous class from its stored prototype:
/// `μ̂_p = μ_p^g + γ · mean(cos(μ_c^{t-1}, μ_c^t))`, the scalar broadcast to
/// every component. With no drift pairs the stored prototype is returned.
pub fn evolve_class_prototype(
    stored: &Prototype,
    drift_pairs: &[(&[f64], &[f64])],
    gamma: f64,
    task: usize,
) -> Result<Prototype> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::config("gamma", "must be finite and >= 0"));
    }
    let shift = match mean_drift(drift_pairs)? {
        Some(m) => gamma * m,
        None => {
            log::warn!(
                "no drift pairs for class {}; replaying the stored prototype unchanged",
                stored.class_id
            );
            0.0
        }
    };
    Ok(evolve_with_shift(stored, shift, task))
}

/// Adds a precomputed scalar shift to every component.
pub fn evolve_with_shift(stored: &Prototype, shift: f64, task: usize) -> Prototype {
    Prototype::new(
        stored.class_id,
        stored.values().iter().map(|v| v + shift).collect(),
        task,
    )
}

/// `β·μ_c^t + (1−β)·μ_c^g` when the class is in the global list, otherwise
/// the current prototype unchanged.
pub fn fuse_feature_prototype(
    current: &Prototype,
    global: &GlobalPrototypeList,
    beta: f64,
) -> Result<Prototype> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("beta", "must lie in [0, 1]"));
    }
    let Some(stored) = global.get(current.class_id) else {
        return Ok(current.clone());
    };
    if stored.dim() != current.dim() {
        return Err(Error::Shape(format!(
            "class {} prototype has {} dims, stored has {}",
            current.class_id,
            current.dim(),
            stored.dim()
        )));
    }
    Ok(Prototype::new(
        current.class_id,
        current
            .values()
            .iter()
            .zip(stored.values())
            .map(|(c, g)| beta * c + (1.0 - beta) * g)
            .collect(),
        current.source_task,
    ))
}

/// Latest prototype per class, plus the raw per-task prototypes of the most
/// recent task each class appeared in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototypeList {
    entries: BTreeMap<usize, Prototype>,
    previous: BTreeMap<usize, Prototype>,
}

impl GlobalPrototypeList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    /// Raw prototype from the last task that contained `class`.
    pub fn previous(&self, class: usize) -> Option<&Prototype> {
        self.previous.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.entries.values()
    }

    /// Overwrites or inserts `fused` entries and records `raw` as each
    /// class's previous-task prototype.
    pub fn update(&mut self, fused: &[Prototype], raw: &[Prototype]) {
        for p in fused {
            self.entries.insert(p.class_id, p.clone());
        }
        for p in raw {
            self.previous.insert(p.class_id, p.clone());
        }
    }
}

/// Round-robin rows over `prototypes`, each plus `N(0, jitter_sigma²)` noise.
pub fn make_prototype_batch<R: Rng + ?Sized>(
    prototypes: &[Prototype],
    batch_size: usize,
    jitter_sigma: f64,
    rng: &mut R,
) -> Result<PrototypeBatch> {
    let first = prototypes
        .first()
        .ok_or_else(|| Error::State("prototype batch needs at least one prototype".into()))?;
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
        return Err(Error::config("jitter_sigma", "must be finite and >= 0"));
    }
    let d = first.dim();
    let noise = Normal::new(0.0, jitter_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config("jitter_sigma", e.to_string()))?;
    let mut data = Vec::with_capacity(batch_size * d);
    let mut labels = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let p = &prototypes[i % prototypes.len()];
        if p.dim() != d {
            return Err(Error::Shape("prototypes differ in dimension".into()));
        }
        labels.push(p.class_id);
        for &v in p.values() {
            data.push(if jitter_sigma > 0.0 {
                v + noise.sample(rng)
            } else {
                v
            });
        }
    }
    Ok(PrototypeBatch {
        vectors: Matrix::from_vec(batch_size, d, data)?,
        labels,
    })
}

/// One line of the prototype export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub class_id: usize,
    pub task_id: usize,
    pub vector: Vec<f64>,
}
