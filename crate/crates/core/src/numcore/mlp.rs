use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{sigmoid, softmax_rows, Tape, Var};
use crate::numcore::tensor::{gemm, Tensor};

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a tape leaf, in `parameters()` order.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Softmax,
}

impl Activation {
    pub(crate) fn apply(self, t: Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => t,
            Activation::Relu => t.map(|x| x.max(0.0)),
            Activation::Silu => t.map(silu),
            Activation::Softmax => softmax_rows(&t)?,
        })
    }

    pub(crate) fn apply_tape(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(v),
            Activation::Relu => tape.relu(v),
            Activation::Silu => tape.silu(v),
            Activation::Softmax => tape.softmax(v),
        }
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Affine map `x·W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], data),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if weight.shape().len() != 2 || bias.len() != out {
            return Err(Error::Dimension(format!(
                "weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (n, k) = input.dims2()?;
        if k != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input width {k}, layer expects {}",
                self.in_dim()
            )));
        }
        let m = self.out_dim();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(n, k, m, input.data(), false, self.weight.data(), false, &mut out, 1.0);
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// `vars` holds `[weight, bias]` as registered on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, vars: &[Var]) -> Result<Var> {
        let h = tape.matmul(input, vars[0])?;
        tape.add_bias(h, vars[1])
    }
}

/// Stack of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl MlpParams {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last `output`.
    pub fn init(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer dims {dims:?}")));
        }
        let layers: Vec<Linear> = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let mut activations = vec![hidden; layers.len() - 1];
        activations.push(output);
        Ok(Self { layers, activations })
    }

    pub fn new(layers: Vec<Linear>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::Parameter("one activation per layer required".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activations })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Linear::out_dim).unwrap_or(0)
    }

    pub fn forward_tape(&self, tape: &mut Tape, input: Var, vars: &[Var]) -> Result<Var> {
        let in_dim = tape.value(input).last_dim();
        if in_dim != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input width {in_dim}, network expects {}",
                self.in_dim()
            )));
        }
        let mut h = input;
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            h = layer.forward_tape(tape, h, &vars[2 * i..2 * i + 2])?;
            h = act.apply_tape(tape, h)?;
        }
        Ok(h)
    }
}

impl Parameterized for MlpParams {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Inference pass through stacked affine + activation layers.
pub fn forward_mlp(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    if input.last_dim() != params.in_dim() {
        return Err(Error::Dimension(format!(
            "input width {}, network expects {}",
            input.last_dim(),
            params.in_dim()
        )));
    }
    let mut h = input.clone();
    for (layer, act) in params.layers.iter().zip(&params.activations) {
        h = act.apply(layer.forward(&h)?)?;
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("mlp output".into()));
    }
    Ok(h)
}
