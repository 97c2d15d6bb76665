use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parameter tensor's worth of per-entry values (gradients, Fisher
/// entries, freeze bits), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

/// Per-parameter values laid out like a [`DenseNet`](super::DenseNet):
/// `[w0, b0, w1, b1, ...]`, weights `in × out`, biases `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffer<T> {
    tensors: Vec<ParamTensor<T>>,
}

/// `true` entries are excluded from SGD updates.
pub type FreezeMask = ParamBuffer<bool>;

impl<T: Clone> ParamBuffer<T> {
    pub fn filled(shapes: &[(usize, usize)], value: T) -> Self {
        Self {
            tensors: shapes
                .iter()
                .map(|&(rows, cols)| ParamTensor {
                    rows,
                    cols,
                    values: vec![value.clone(); rows * cols],
                })
                .collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<ParamTensor<T>>) -> Result<Self> {
        for (i, t) in tensors.iter().enumerate() {
            if t.values.len() != t.rows * t.cols {
                return Err(Error::Shape(format!(
                    "tensor {i}: {} values for {}x{}",
                    t.values.len(),
                    t.rows,
                    t.cols
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| (t.rows, t.cols)).collect()
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &ParamTensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ParamTensor<T> {
        &mut self.tensors[i]
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.tensors.iter_mut().flat_map(|t| t.values.iter_mut())
    }

    pub fn ensure_shapes(&self, shapes: &[(usize, usize)], what: &str) -> Result<()> {
        if self.shapes() != shapes {
            return Err(Error::Shape(format!(
                "{what}: {:?} does not match {:?}",
                self.shapes(),
                shapes
            )));
        }
        Ok(())
    }

    /// Appends input rows to the first weight tensor, filling with `fill`.
    pub fn grow_input_rows(&mut self, new_rows: usize, fill: T) -> Result<()> {
        let first = self
            .tensors
            .first_mut()
            .ok_or_else(|| Error::Shape("empty parameter buffer".into()))?;
        if new_rows < first.rows {
            return Err(Error::Shape(format!(
                "cannot shrink input from {} to {new_rows}",
                first.rows
            )));
        }
        let extra = (new_rows - first.rows) * first.cols;
        first.values.extend(std::iter::repeat_n(fill, extra));
        first.rows = new_rows;
        Ok(())
    }

    /// Appends output columns to the last weight and bias tensors.
    pub fn grow_output_cols(&mut self, new_cols: usize, fill: T) -> Result<()> {
        let n = self.tensors.len();
        if n < 2 {
            return Err(Error::Shape("parameter buffer has no output layer".into()));
        }
        for t in &mut self.tensors[n - 2..] {
            if new_cols < t.cols {
                return Err(Error::Shape(format!(
                    "cannot shrink output from {} to {new_cols}",
                    t.cols
                )));
            }
            let mut values = Vec::with_capacity(t.rows * new_cols);
            for r in 0..t.rows {
                values.extend_from_slice(&t.values[r * t.cols..(r + 1) * t.cols]);
                values.extend(std::iter::repeat_n(fill.clone(), new_cols - t.cols));
            }
            t.values = values;
            t.cols = new_cols;
        }
        Ok(())
    }
}

impl ParamBuffer<f64> {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self::filled(shapes, 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &ParamBuffer<f64>, s: f64) -> Result<()> {
        other.ensure_shapes(&self.shapes(), "add_scaled")?;
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl ParamBuffer<bool> {
    pub fn count_true(&self) -> usize {
        self.iter().filter(|&&b| b).count()
    }
}
