use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FreezeMask, Matrix, ParamBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, m: &mut Matrix) {
        if self == Activation::Relu {
            for v in m.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// A fully connected layer computing `act(x · W + b)`, `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not fit weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = glorot_matrix(fan_in, fan_out, fan_in, fan_out, rng);
        Self {
            weight,
            bias: Matrix::zeros(1, fan_out),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

fn glorot_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

/// Gradients of a scalar loss with respect to a network's parameters and
/// its input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: ParamBuffer<f64>,
    pub input: Matrix,
}

impl GradientSet {
    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.params.tensor(2 * layer).values
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.params.tensor(2 * layer + 1).values
    }
}

/// Stack of dense layers. `forward` caches intermediates for a single
/// subsequent `backward`; `predict` is the cache-free path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// Builds `dims[0] → dims[1] → … → dims[n]` with ReLU hidden layers and
    /// an identity output layer.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Snapshot of every parameter value.
    pub fn params(&self) -> ParamBuffer<f64> {
        let tensors = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|m| super::ParamTensor {
                rows: m.rows(),
                cols: m.cols(),
                values: m.data().to_vec(),
            })
            .collect();
        ParamBuffer::from_tensors(tensors).expect("shapes come from matrices")
    }

    /// Mutable access to parameter tensor `i` (`2l` = weight, `2l+1` = bias).
    pub fn param_tensor_mut(&mut self, i: usize) -> &mut [f64] {
        let layer = &mut self.layers[i / 2];
        if i.is_multiple_of(2) {
            layer.weight.data_mut()
        } else {
            layer.bias.data_mut()
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without touching the cache.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut z = x.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            layer.activation.apply(&mut z);
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that caches what `backward` needs.
    pub fn forward(&mut self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut z = x.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            let mut a = z.clone();
            layer.activation.apply(&mut a);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        self.cache = Some(ForwardCache { inputs, pre });
        Ok(x)
    }

    /// Backpropagates `dout` (gradient w.r.t. the network output) through
    /// the cached forward pass, consuming the cache.
    pub fn backward(&mut self, dout: &Matrix) -> Result<GradientSet> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward".into()))?;
        let batch = cache.inputs[0].rows();
        if dout.shape() != (batch, self.output_dim()) {
            let shape = dout.shape();
            self.cache = Some(cache);
            return Err(Error::Shape(format!(
                "output gradient {shape:?}, expected {:?}",
                (batch, self.output_dim())
            )));
        }
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        let mut delta = dout.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, z) in delta.data_mut().iter_mut().zip(cache.pre[l].data()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let dw = cache.inputs[l].t_matmul(&delta)?;
            let db = delta.sum_rows();
            let dx = delta.matmul_t(&layer.weight)?;
            tensors.push(db);
            tensors.push(dw);
            delta = dx;
        }
        tensors.reverse();
        let params = ParamBuffer::from_tensors(
            tensors
                .into_iter()
                .map(|m| super::ParamTensor {
                    rows: m.rows(),
                    cols: m.cols(),
                    values: m.into_vec(),
                })
                .collect(),
        )?;
        Ok(GradientSet {
            params,
            input: delta,
        })
    }

    /// `θ ← θ − lr·g` on every entry whose mask bit is false. Masked entries
    /// are not written at all.
    pub fn sgd_step(
        &mut self,
        grads: &ParamBuffer<f64>,
        lr: f64,
        mask: Option<&FreezeMask>,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
        }
        let shapes = self.param_shapes();
        grads.ensure_shapes(&shapes, "sgd gradient")?;
        if let Some(mask) = mask {
            mask.ensure_shapes(&shapes, "freeze mask")?;
        }
        for i in 0..shapes.len() {
            let g = &grads.tensor(i).values;
            let frozen = mask.map(|m| &m.tensor(i).values);
            let theta = self.param_tensor_mut(i);
            for (j, (p, gv)) in theta.iter_mut().zip(g).enumerate() {
                if frozen.is_some_and(|f| f[j]) {
                    continue;
                }
                *p -= lr * gv;
            }
        }
        Ok(())
    }

    /// Widens the input layer to `new_in`; existing rows are kept, new rows
    /// are Glorot-initialised against the widened fan-in.
    pub fn grow_input<R: Rng + ?Sized>(&mut self, new_in: usize, rng: &mut R) -> Result<()> {
        let first = &mut self.layers[0];
        let old_in = first.input_dim();
        if new_in < old_in {
            return Err(Error::Shape(format!("cannot shrink input {old_in} to {new_in}")));
        }
        if new_in > old_in {
            let out = first.output_dim();
            let extra = glorot_matrix(new_in - old_in, out, new_in, out, rng);
            first.weight.append_rows(&extra)?;
        }
        self.cache = None;
        Ok(())
    }

    /// Widens the output layer to `new_out`; existing columns are kept, new
    /// columns are Glorot-initialised with zero bias.
    pub fn grow_output<R: Rng + ?Sized>(&mut self, new_out: usize, rng: &mut R) -> Result<()> {
        let last = self.layers.last_mut().expect("non-empty");
        let old_out = last.output_dim();
        if new_out < old_out {
            return Err(Error::Shape(format!("cannot shrink output {old_out} to {new_out}")));
        }
        if new_out > old_out {
            let fan_in = last.input_dim();
            let extra = glorot_matrix(fan_in, new_out - old_out, fan_in, new_out, rng);
            last.weight.append_cols(&extra)?;
            last.bias.append_cols(&Matrix::zeros(1, new_out - old_out))?;
        }
        self.cache = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn single(weight: Matrix, bias: Matrix, act: Activation) -> DenseNet {
        DenseNet::from_layers(vec![Layer::new(weight, bias, act).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut net = single(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Identity);
        assert_eq!(net.forward(&m(&[&[1.0, 2.0]])).unwrap(), m(&[&[1.0, 2.0]]));
    }

    #[test]
    fn relu_clips_negatives() {
        let mut net = single(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Relu);
        assert_eq!(net.forward(&m(&[&[-1.0, 3.0]])).unwrap(), m(&[&[0.0, 3.0]]));
    }

    #[test]
    fn two_to_one_layer() {
        let mut net = single(m(&[&[1.0], &[1.0]]), m(&[&[0.5]]), Activation::Identity);
        assert_eq!(net.forward(&m(&[&[1.0, 2.0]])).unwrap(), m(&[&[3.5]]));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut net = single(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Identity);
        assert!(matches!(net.forward(&Matrix::zeros(1, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_needs_forward() {
        let mut net = single(Matrix::identity(2), Matrix::zeros(1, 2), Activation::Identity);
        assert!(matches!(net.backward(&Matrix::zeros(1, 2)), Err(Error::State(_))));
        net.forward(&Matrix::zeros(1, 2)).unwrap();
        net.backward(&Matrix::zeros(1, 2)).unwrap();
        // the cache is consumed
        assert!(net.backward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenseNet::mlp(&[4, 5, 3], &mut rng).unwrap();
        let x = Matrix::filled(2, 4, 0.7);
        net.forward(&x).unwrap();
        let g = net.backward(&Matrix::zeros(2, 3)).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input_transpose() {
        let w = m(&[&[0.3], &[-0.2], &[0.9]]);
        let mut net = single(w, Matrix::zeros(1, 1), Activation::Identity);
        let x = m(&[&[1.0, 2.0, 3.0]]);
        net.forward(&x).unwrap();
        let g = net.backward(&m(&[&[1.0]])).unwrap();
        assert_eq!(g.weight(0), &[1.0, 2.0, 3.0]);
        assert_eq!(g.bias(0), &[1.0]);
        assert_eq!(g.input, m(&[&[0.3, -0.2, 0.9]]));
    }

    #[test]
    fn sgd_masked_update() {
        let mut net = single(m(&[&[10.0, 20.0]]), Matrix::zeros(1, 2), Activation::Identity);
        let grads = ParamBuffer::from_tensors(vec![
            super::super::ParamTensor { rows: 1, cols: 2, values: vec![1.0, 1.0] },
            super::super::ParamTensor { rows: 1, cols: 2, values: vec![0.0, 0.0] },
        ])
        .unwrap();
        let mut mask = FreezeMask::filled(&net.param_shapes(), false);
        mask.tensor_mut(0).values = vec![true, false];
        net.sgd_step(&grads, 1.0, Some(&mask)).unwrap();
        assert_eq!(net.layers()[0].weight, m(&[&[10.0, 19.0]]));

        let all = FreezeMask::filled(&net.param_shapes(), true);
        let before = net.clone();
        net.sgd_step(&grads, 1.0, Some(&all)).unwrap();
        assert_eq!(net, before);
        assert!(net.sgd_step(&grads, 0.0, None).is_err());
    }

    #[test]
    fn grow_output_keeps_old_columns_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::mlp(&[3, 4, 2], &mut rng).unwrap();
        let before = net.layers()[1].clone();
        net.grow_output(5, &mut rng).unwrap();
        let after = &net.layers()[1];
        assert_eq!(after.weight.cols(), 5);
        for r in 0..before.weight.rows() {
            for c in 0..2 {
                assert_eq!(after.weight.get(r, c).to_bits(), before.weight.get(r, c).to_bits());
            }
        }
        assert_eq!(after.bias.data()[..2], before.bias.data()[..]);
        assert_eq!(after.bias.data()[2..], [0.0; 3]);
    }

    #[test]
    fn grow_input_keeps_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::mlp(&[2, 3], &mut rng).unwrap();
        let before = net.layers()[0].weight.clone();
        net.grow_input(4, &mut rng).unwrap();
        assert_eq!(net.input_dim(), 4);
        assert_eq!(net.layers()[0].weight.data()[..6], before.data()[..]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Layer::glorot(10, 6, Activation::Relu, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(layer.weight.data().iter().all(|v| v.abs() <= limit));
        assert!(layer.bias.data().iter().all(|&v| v == 0.0));
    }
}
