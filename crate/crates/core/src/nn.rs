//! Parameter containers shared by the encoder and the classifier heads.

use prefixrep_tensor::{Graph, Result, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    pub fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear { weight: Tensor::randn(&[fan_in, fan_out], std, rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> LinearVars {
        LinearVars { weight: g.leaf(self.weight.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_broadcast(y, self.bias)
    }

    pub fn flat(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl<T: Scalar> Norm<T> {
    pub fn init(dim: usize) -> Self {
        Norm { gain: Tensor::full(&[dim], T::one()), bias: Tensor::zeros(&[dim]) }
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> NormVars {
        NormVars { gain: g.leaf(self.gain.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.gain, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.gain, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Norm<U> {
        Norm { gain: self.gain.cast(), bias: self.bias.cast() }
    }
}

impl NormVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, eps)
    }

    pub fn flat(&self) -> [Var; 2] {
        [self.gain, self.bias]
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by `1/(1-rate)`.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    g.mul_const(x, mask)
}
