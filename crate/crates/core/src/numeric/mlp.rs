//! Fully connected networks with a hand-written reverse pass.
//!
//! Weights are stored `[out, in]` row-major. Hidden layers use the configured
//! activation; the last layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out, in]`
    pub weight: DenseArray,
    /// `[out]`
    pub bias: DenseArray,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
    #[serde(skip)]
    last_tape: Option<MlpTape>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.activation == other.activation
            && self.input_dim == other.input_dim
            && self.output_dim == other.output_dim
    }
}

impl Mlp {
    /// `dims` lists layer widths from input to output, e.g. `[12, 128, 128, 3]`.
    /// The final layer's weights are scaled by `final_scale` and its bias is zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("bad MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let scale = if l + 1 == n { final_scale } else { 1.0 };
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound) * scale)
                    .collect();
                Layer {
                    weight: DenseArray::from_vec(&[fan_out, fan_in], w).expect("shape"),
                    bias: DenseArray::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            input_dim: dims[0],
            output_dim: dims[n],
            last_tape: None,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidInput("MLP needs at least one layer".into()))?;
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Dimension("bias length".into()));
            }
        }
        let input_dim = first.in_dim();
        let output_dim = layers.last().unwrap().out_dim();
        Ok(Self {
            layers,
            activation,
            input_dim,
            output_dim,
            last_tape: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameter arrays, weight then bias per layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut DenseArray> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn params(&self) -> impl Iterator<Item = &DenseArray> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(|p| p.zero_grad());
    }

    /// Overwrites the output layer's bias.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let last = self.layers.last_mut().expect("non-empty");
        if bias.len() != last.bias.len() {
            return Err(Error::Dimension("output bias".into()));
        }
        last.bias.values_mut().copy_from_slice(bias);
        Ok(())
    }

    /// Forward pass that returns its tape instead of storing it.
    pub fn forward_taped(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if input.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "MLP expects input of length {}, got {}",
                self.input_dim,
                input.len()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let w = layer.weight.values();
            let b = layer.bias.values();
            let z: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &w[o * inp..(o + 1) * inp];
                    b[o] + row.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            let next = if l + 1 == n {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MLP output"));
        }
        Ok((x, MlpTape { inputs, pre }))
    }

    /// Reverse pass for a recorded tape. Parameter gradients are added to the
    /// existing buffers; the gradient with respect to the input is returned.
    pub fn backward_taped(&mut self, tape: &MlpTape, output_grad: &[f64]) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_dim {
            return Err(Error::Dimension(format!(
                "output gradient of length {} for MLP output {}",
                output_grad.len(),
                self.output_dim
            )));
        }
        let n = self.layers.len();
        let mut delta = output_grad.to_vec();
        for l in (0..n).rev() {
            if l + 1 != n {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= self.activation.derivative(z);
                }
            }
            let layer = &mut self.layers[l];
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let x = &tape.inputs[l];
            {
                let gw = layer.weight.grad_mut();
                for o in 0..out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (g, xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            for (g, d) in layer.bias.grad_mut().iter_mut().zip(&delta) {
                *g += d;
            }
            let w = layer.weight.values();
            let mut next = vec![0.0; inp];
            for o in 0..out {
                let d = delta[o];
                if d != 0.0 {
                    for (nx, wi) in next.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *nx += d * wi;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Forward pass that keeps the tape for a later [`Mlp::backward`].
    pub fn forward(&mut self, input: &DenseArray) -> Result<DenseArray> {
        let (out, tape) = self.forward_taped(input.values())?;
        self.last_tape = Some(tape);
        Ok(DenseArray::vector(out))
    }

    pub fn backward(&mut self, output_grad: &DenseArray) -> Result<DenseArray> {
        let tape = self
            .last_tape
            .take()
            .ok_or(Error::BackwardBeforeForward("mlp"))?;
        let g = self.backward_taped(&tape, output_grad.values());
        self.last_tape = Some(tape);
        Ok(DenseArray::vector(g?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(out: usize, inp: usize, w: Vec<f64>, b: Vec<f64>) -> Layer {
        Layer {
            weight: DenseArray::from_vec(&[out, inp], w).unwrap(),
            bias: DenseArray::vector(b),
        }
    }

    /// Straightforward evaluator used as an oracle for the forward pass.
    fn naive_eval(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut z = layer.bias.values().to_vec();
            for o in 0..layer.out_dim() {
                for i in 0..layer.in_dim() {
                    z[o] += layer.weight.values()[o * layer.in_dim() + i] * h[i];
                }
            }
            if l + 1 < n {
                for v in z.iter_mut() {
                    *v = (1.0 + v.exp()).ln();
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn zero_weights_give_last_bias() {
        let net = Mlp::from_layers(
            vec![
                layer(2, 3, vec![0.0; 6], vec![0.5, -0.5]),
                layer(2, 2, vec![0.0; 4], vec![1.5, -2.0]),
            ],
            Activation::Softplus,
        )
        .unwrap();
        let (y, _) = net.forward_taped(&[3.0, -1.0, 7.0]).unwrap();
        assert_eq!(y, vec![1.5, -2.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Mlp::from_layers(
            vec![layer(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.0; 3])],
            Activation::Softplus,
        )
        .unwrap();
        let y = net.forward(&DenseArray::vector(vec![0.3, -2.0, 5.0])).unwrap();
        assert_eq!(y.values(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn two_layer_matches_naive_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(&[4, 6, 3], Activation::Softplus, 1.0, &mut rng).unwrap();
        let x = [0.1, -0.7, 0.4, 1.2];
        let (y, _) = net.forward_taped(&x).unwrap();
        let expected = naive_eval(&net, &x);
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_dimension_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 3], Activation::Softplus, 1.0, &mut rng).unwrap();
        assert!(matches!(net.forward_taped(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 2], Activation::Softplus, 1.0, &mut rng).unwrap();
        assert!(matches!(
            net.backward(&DenseArray::vector(vec![1.0, 1.0])),
            Err(Error::BackwardBeforeForward(_))
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[3, 5, 2], Activation::Softplus, 1.0, &mut rng).unwrap();
        net.forward(&DenseArray::vector(vec![0.2, 0.3, -0.1])).unwrap();
        let gx = net.backward(&DenseArray::vector(vec![0.0, 0.0])).unwrap();
        assert!(gx.values().iter().all(|&v| v == 0.0));
        for p in net.params() {
            assert!(p.grad().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 4, 1], Activation::Tanh, 1.0, &mut rng).unwrap();
        let x = DenseArray::vector(vec![0.5, -0.25, 0.75]);
        net.forward(&x).unwrap();
        net.backward(&DenseArray::vector(vec![1.3])).unwrap();
        let once: Vec<Vec<f64>> = net.params().map(|p| p.grad().unwrap().to_vec()).collect();
        net.backward(&DenseArray::vector(vec![1.3])).unwrap();
        for (p, g1) in net.params().zip(&once) {
            for (a, b) in p.grad().unwrap().iter().zip(g1) {
                assert!((a - 2.0 * b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }
}
