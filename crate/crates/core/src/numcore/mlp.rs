use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, t: &Tensor2) -> Tensor2 {
        match self {
            Activation::Relu => t.map(|x| x.max(0.0)),
            Activation::Tanh => t.map(f64::tanh),
            Activation::Sigmoid => t.map(sigmoid),
            Activation::Identity => t.clone(),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// One affine layer `act(x Wᵀ + b)` with `W: out x in` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Scaled-normal init (`std = gain / sqrt(in)`), zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor2::random_normal(out_dim, in_dim, gain / (in_dim.max(1) as f64).sqrt(), rng),
            bias: Tensor2::zeros(1, out_dim),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor2::zeros(out_dim, in_dim),
            bias: Tensor2::zeros(1, out_dim),
            activation,
        }
    }
}

/// A stack of dense layers, optionally wrapped as `x + layers(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub residual: bool,
}

/// Tape handles for an [`MlpParams`], in [`MlpParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub vars: Vec<Var>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, residual: bool) -> Result<Self> {
        let mlp = Self { layers, residual };
        mlp.validate()?;
        Ok(mlp)
    }

    /// Hidden layers use `hidden_act`; the last layer uses `out_act`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden_act: Activation, out_act: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return shape_err("MlpParams::random", "need at least input and output dims");
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                Layer::random(dims[i], dims[i + 1], act, 1.0, rng)
            })
            .collect();
        Self::new(layers, false)
    }

    /// Single identity-activation layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Tensor2::identity(dim),
                bias: Tensor2::zeros(1, dim),
                activation: Activation::Identity,
            }],
            residual: false,
        }
    }

    /// `x + MLP(x)` with the final layer zero-initialised, so the map starts
    /// as the identity.
    pub fn residual_identity<R: Rng + ?Sized>(dim: usize, hidden: &[usize], act: Activation, rng: &mut R) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            if i + 1 == n {
                layers.push(Layer::zeros(dims[i], dims[i + 1], Activation::Identity));
            } else {
                layers.push(Layer::random(dims[i], dims[i + 1], act, 1.0, rng));
            }
        }
        Self::new(layers, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return shape_err("MlpParams", "no layers");
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return shape_err("MlpParams", format!("layer {i} bias {:?} for out dim {}", l.bias.shape(), l.out_dim()));
            }
            if i > 0 && self.layers[i - 1].out_dim() != l.in_dim() {
                return shape_err(
                    "MlpParams",
                    format!("layer {} emits {} but layer {i} expects {}", i - 1, self.layers[i - 1].out_dim(), l.in_dim()),
                );
            }
        }
        if self.residual && self.in_dim() != self.out_dim() {
            return shape_err("MlpParams", "residual MLP needs in_dim == out_dim");
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn final_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Plain forward pass, no tape.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        if input.cols() != self.in_dim() {
            return shape_err("mlp_forward", format!("input has {} columns, MLP expects {}", input.cols(), self.in_dim()));
        }
        let mut x = input.clone();
        for l in &self.layers {
            x = l.activation.apply(&x.matmul_t(&l.weight)?.add_row(&l.bias)?);
        }
        if self.residual {
            x = x.add(input)?;
        }
        Ok(x)
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            vars: tape.leaves(&self.tensors()),
        }
    }

    /// Forward pass recorded on `tape` using previously bound parameters.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        if tape.value(input).cols() != self.in_dim() {
            return shape_err(
                "mlp_forward",
                format!("input has {} columns, MLP expects {}", tape.value(input).cols(), self.in_dim()),
            );
        }
        let mut x = input;
        for (i, l) in self.layers.iter().enumerate() {
            let h = tape.matmul_t(x, vars.vars[2 * i])?;
            let h = tape.add_row(h, vars.vars[2 * i + 1])?;
            x = l.activation.apply_tape(tape, h)?;
        }
        if self.residual {
            x = tape.add(x, input)?;
        }
        Ok(x)
    }
}

/// Plain forward pass of `params` on `input`.
pub fn mlp_forward(params: &MlpParams, input: &Tensor2) -> Result<Tensor2> {
    params.forward(input)
}
