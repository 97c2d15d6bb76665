use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{partition_vertically, Partition, VerticalDataset};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How CSV feature columns are assigned to passive parties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Contiguous near-equal blocks over the non-label columns.
    Even { parties: usize },
    /// Explicit column names per party.
    Columns(Vec<Vec<String>>),
}

/// Reads a UTF-8 CSV with a header row. Feature columns are z-scored
/// (population std, constant columns map to 0). Labels are re-indexed
/// densely: ascending when every label is an integer, otherwise in order
/// of first appearance.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    partition: &PartitionSpec,
) -> Result<VerticalDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Ingestion {
            row: 1,
            column: label_column.to_owned(),
            message: "label column not found in header".into(),
        })?;
    let feature_names: Vec<&String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h)
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Ingestion {
            row: 1,
            column: String::new(),
            message: "no feature columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Ingestion {
                row,
                column: String::new(),
                message: format!("{} cells, header has {}", record.len(), headers.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(cell.trim().to_owned());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                row,
                column: headers[j].clone(),
                message: format!("non-numeric value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    column: headers[j].clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Ingestion {
            row: 2,
            column: String::new(),
            message: "file has no data rows".into(),
        });
    }

    let mut features = Matrix::from_vec(raw_labels.len(), feature_names.len(), values)?;
    zscore_columns(&mut features);
    let (labels, n_classes) = index_labels(&raw_labels);

    let partition = match partition {
        PartitionSpec::Even { parties } => partition_vertically(feature_names.len(), *parties)?,
        PartitionSpec::Columns(groups) => {
            let lookup: HashMap<&str, usize> = feature_names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let blocks = groups
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|name| {
                            lookup.get(name.as_str()).copied().ok_or_else(|| Error::Ingestion {
                                row: 1,
                                column: name.clone(),
                                message: "partition names a missing column".into(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Partition::new(blocks, feature_names.len())?
        }
    };
    VerticalDataset::new(features, labels, partition, n_classes)
}

fn zscore_columns(m: &mut Matrix) {
    let n = m.rows() as f64;
    for c in 0..m.cols() {
        let mean = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / n;
        let var = (0..m.rows()).map(|r| (m.get(r, c) - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..m.rows() {
            m.set(r, c, (m.get(r, c) - mean) / std);
        }
    }
}

fn index_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let ints: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
    let mut index: HashMap<&str, usize> = HashMap::new();
    if let Some(ints) = ints {
        let mut uniq = ints.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let labels = ints
            .iter()
            .map(|v| uniq.binary_search(v).expect("present"))
            .collect();
        return (labels, uniq.len());
    }
    let labels = raw
        .iter()
        .map(|s| {
            let next = index.len();
            *index.entry(s.as_str()).or_insert(next)
        })
        .collect();
    (labels, index.len())
}

/// Writes features plus a trailing `label` column (`f0..f{M-1},label`).
pub fn write_csv(dataset: &VerticalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.n_features()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    let features = dataset.all_features();
    let labels = dataset.label_view();
    for (i, &y) in labels.all().iter().enumerate() {
        let mut rec: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
