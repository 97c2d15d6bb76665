use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Assignment of feature columns to passive parties; `blocks[k]` is party
/// `k`'s ordered column list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    /// Checks that the blocks are non-empty, disjoint and cover `0..n_columns`.
    pub fn new(blocks: Vec<Vec<usize>>, n_columns: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("partition", "needs at least one party"));
        }
        let mut seen = vec![false; n_columns];
        for (k, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::config("partition", format!("party {k} has no columns")));
            }
            for &c in block {
                if c >= n_columns {
                    return Err(Error::config(
                        "partition",
                        format!("column {c} out of range ({n_columns} columns)"),
                    ));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::config("partition", format!("column {c} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config("partition", format!("column {missing} is unassigned")));
        }
        Ok(Self { blocks })
    }

    pub fn n_parties(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, party: usize) -> &[usize] {
        &self.blocks[party]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }
}

/// Sizes of `k` contiguous groups over `n` items: the first `n % k` groups
/// get one extra item.
pub(crate) fn split_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Contiguous near-equal column blocks, one per party.
pub fn partition_vertically(n_features: usize, k_parties: usize) -> Result<Partition> {
    if k_parties == 0 {
        return Err(Error::config("k_parties", "must be at least 1"));
    }
    if k_parties > n_features {
        return Err(Error::config(
            "k_parties",
            format!("{k_parties} parties cannot share {n_features} feature columns"),
        ));
    }
    let mut start = 0;
    let blocks = split_sizes(n_features, k_parties)
        .into_iter()
        .map(|size| {
            let block = (start..start + size).collect();
            start += size;
            block
        })
        .collect();
    Partition::new(blocks, n_features)
}

/// Aligned samples with vertically partitioned features. Labels are only
/// reachable through [`VerticalDataset::label_view`]; passive parties get a
/// [`PartyFeatures`] view that exposes their own columns and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalDataset {
    features: Matrix,
    labels: Vec<usize>,
    partition: Partition,
    n_classes: usize,
}

impl VerticalDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        partition: Partition,
        n_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Domain(format!("label {bad} >= n_classes {n_classes}")));
        }
        features.ensure_finite("features")?;
        let covered: usize = partition.blocks().iter().map(Vec::len).sum();
        if covered != features.cols() {
            return Err(Error::config(
                "partition",
                format!("covers {covered} columns, dataset has {}", features.cols()),
            ));
        }
        Partition::new(partition.blocks().to_vec(), features.cols())?;
        Ok(Self {
            features,
            labels,
            partition,
            n_classes,
        })
    }

    pub fn with_partition(mut self, partition: Partition) -> Result<Self> {
        let checked = Partition::new(partition.blocks().to_vec(), self.features.cols())?;
        self.partition = checked;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// The active party's handle on the labels.
    pub fn label_view(&self) -> LabelView<'_> {
        LabelView {
            labels: &self.labels,
        }
    }

    /// Feature access for one passive party.
    pub fn party_view(&self, party: usize) -> Result<PartyFeatures<'_>> {
        if party >= self.partition.n_parties() {
            return Err(Error::Protocol(format!("unknown party {party}")));
        }
        Ok(PartyFeatures {
            features: &self.features,
            block: self.partition.block(party),
        })
    }

    /// Raw feature access across all columns (monolithic baselines, export).
    pub fn all_features(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabelView<'a> {
    labels: &'a [usize],
}

impl LabelView<'_> {
    pub fn all(&self) -> &[usize] {
        self.labels
    }

    pub fn gather(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }
}

/// One passive party's window onto the feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct PartyFeatures<'a> {
    features: &'a Matrix,
    block: &'a [usize],
}

impl PartyFeatures<'_> {
    pub fn block(&self) -> &[usize] {
        self.block
    }

    /// Gathers `rows × view`; every column of `view` must belong to this
    /// party's block.
    pub fn gather(&self, rows: &[usize], view: &[usize]) -> Result<Matrix> {
        if let Some(c) = view.iter().find(|c| !self.block.contains(c)) {
            return Err(Error::Protocol(format!(
                "column {c} is not held by this party"
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= self.features.rows()) {
            return Err(Error::Protocol(format!("sample {r} out of range")));
        }
        Ok(self.features.select(rows, view))
    }

    /// Like [`gather`](Self::gather) but the output has one column per entry
    /// of `model_columns`; columns outside `visible` are zero.
    pub fn gather_masked(
        &self,
        rows: &[usize],
        model_columns: &[usize],
        visible: &[usize],
    ) -> Result<Matrix> {
        let mut m = self.gather(rows, model_columns)?;
        for (j, c) in model_columns.iter().enumerate() {
            if !visible.contains(c) {
                for r in 0..m.rows() {
                    m.set(r, j, 0.0);
                }
            }
        }
        Ok(m)
    }
}
