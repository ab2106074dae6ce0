//! Small dense feed-forward networks with hand-written backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at a pre-activation value; the rectifier uses 0 at exactly 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Matrix,
    /// `out x 1`
    pub bias: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn preactivation(&self, x: &Matrix) -> Matrix {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias.column(0);
        }
        z
    }
}

/// Parameters of one modality network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::contract("network needs at least one layer"));
        };
        if last.activation != Activation::Identity {
            return Err(Error::contract(
                "final layer must use the identity activation",
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (l.outputs(), 1) {
                return Err(Error::contract(format!(
                    "layer {i}: bias shape {:?}",
                    l.bias.shape()
                )));
            }
            if l.inputs() == 0 || l.outputs() == 0 {
                return Err(Error::contract(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::contract(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// `[in, hidden.., out]`
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::outputs))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| all_finite(&l.weight) && all_finite(&l.bias))
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::contract(format!(
                "network expects {} input rows, got {}",
                self.input_dim(),
                inputs.nrows()
            )));
        }
        Ok(())
    }

    /// Map a `p x n` feature matrix to `d x n` representations.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut x = inputs.clone();
        for l in &self.layers {
            let mut z = l.preactivation(&x);
            z.apply(|v| *v = l.activation.apply(*v));
            x = z;
        }
        Ok(x)
    }

    /// Gradients of `Σ_ij output_grad_ij · out_ij` with respect to every
    /// weight and bias, summed over the batch columns.
    pub fn parameter_gradients(
        &self,
        inputs: &Matrix,
        output_grad: &Matrix,
    ) -> Result<Vec<(Matrix, Matrix)>> {
        self.check_input(inputs)?;
        if output_grad.shape() != (self.output_dim(), inputs.ncols()) {
            return Err(Error::contract(format!(
                "output gradient is {:?}, expected {:?}",
                output_grad.shape(),
                (self.output_dim(), inputs.ncols())
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = inputs.clone();
        for l in &self.layers {
            let z = l.preactivation(&x);
            let mut a = z.clone();
            a.apply(|v| *v = l.activation.apply(*v));
            layer_inputs.push(x);
            pre.push(z);
            x = a;
        }

        let mut grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); self.layers.len()];
        let mut upstream = output_grad.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let mut delta = upstream;
            delta.zip_apply(&pre[idx], |g, z| *g *= l.activation.derivative(z));
            let dw = &delta * layer_inputs[idx].transpose();
            let db = Matrix::from_iterator(l.outputs(), 1, delta.row_iter().map(|r| r.sum()));
            if idx > 0 {
                upstream = l.weight.transpose() * &delta;
            } else {
                upstream = Matrix::zeros(0, 0);
            }
            grads[idx] = (dw, db);
        }
        Ok(grads)
    }

    /// One SGD step `θ ← θ − lr · ∂J/∂θ` given `∂J/∂out` for the batch.
    pub fn backward_update(&self, inputs: &Matrix, output_grad: &Matrix, lr: f64) -> Result<Self> {
        let mut next = self.clone();
        next.sgd_step(inputs, output_grad, lr)?;
        Ok(next)
    }

    pub fn sgd_step(&mut self, inputs: &Matrix, output_grad: &Matrix, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::contract(format!(
                "learning rate {lr} must be finite and >= 0"
            )));
        }
        let grads = self.parameter_gradients(inputs, output_grad)?;
        for (l, (dw, db)) in self.layers.iter_mut().zip(grads) {
            l.weight -= lr * dw;
            l.bias -= lr * db;
        }
        Ok(())
    }
}

/// Weights ~ N(0, 1/fan_in), zero biases.
pub fn init_params(
    layer_dims: &[usize],
    activations: &[Activation],
    seed: u64,
) -> Result<NetworkParams> {
    if layer_dims.len() < 2 || activations.len() != layer_dims.len() - 1 {
        return Err(Error::contract(format!(
            "{} layer dims need {} activations, got {}",
            layer_dims.len(),
            layer_dims.len().saturating_sub(1),
            activations.len()
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::contract("layer dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .zip(activations)
        .map(|(io, &activation)| {
            let scale = 1.0 / (io[0] as f64).sqrt();
            let weight = Matrix::from_fn(io[1], io[0], |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            DenseLayer {
                weight,
                bias: Matrix::zeros(io[1], 1),
                activation,
            }
        })
        .collect();
    NetworkParams::new(layers)
}

/// The two-layer shape shared by all three modality networks.
pub fn two_layer(input: usize, hidden: usize, output: usize, seed: u64) -> Result<NetworkParams> {
    init_params(
        &[input, hidden, output],
        &[Activation::Relu, Activation::Identity],
        seed,
    )
}
