//! Stateful layers that cache what their backward pass needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvGeometry};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Propagates `grad_out` to the input, accumulating parameter gradients.
    /// Must follow a `forward` call.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        Vec::new()
    }
}

fn missing_forward(layer: &str) -> Error {
    Error::invalid(format!("{layer}: backward called before forward"))
}

/// He-uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<T>, ConvGeometry)>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_c;
        Self {
            weight: he_uniform(&[kernel, kernel, in_c, out_c], fan_in, rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let fwd = ops::conv2d(input, &self.weight, Some(&self.bias), self.stride, self.padding)?;
        self.cache = (mode == Mode::Train).then_some((fwd.cols, fwd.geometry));
        Ok(fwd.output)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cols, geometry) = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let mut gw = self.weight.take_grad();
        let mut gb = self.bias.take_grad();
        let dx = ops::conv2d_backward(cols, geometry, &self.weight, grad_out, &mut gw, Some(&mut gb));
        self.weight.set_grad(gw);
        self.bias.set_grad(gb);
        dx
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, arg) = ops::maxpool2d(input, self.window, self.stride)?;
        self.cache = (mode == Mode::Train).then(|| (input.shape().to_vec(), arg));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.as_ref().ok_or_else(|| missing_forward("maxpool2d"))?;
        ops::maxpool2d_backward(shape, arg, grad_out)
    }
}

#[derive(Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = ops::relu(input);
        self.output = (mode == Mode::Train).then(|| out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output.as_ref().ok_or_else(|| missing_forward("relu"))?;
        ops::relu_backward(out, grad_out)
    }
}

pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: he_uniform(&[fan_in, fan_out], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
            input: None,
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = ops::dense(input, &self.weight, &self.bias)?;
        self.input = (mode == Mode::Train).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.as_ref().ok_or_else(|| missing_forward("dense"))?;
        let mut gw = self.weight.take_grad();
        let mut gb = self.bias.take_grad();
        let dx = ops::dense_backward(input, &self.weight, grad_out, &mut gw, &mut gb);
        self.weight.set_grad(gw);
        self.bias.set_grad(gb);
        dx
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Inverted dropout; identity in [`Mode::Eval`].
pub struct Dropout<T> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        Ok(Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.mask = None;
                Ok(input.clone())
            }
            Mode::Train => {
                let (out, mask) = ops::dropout(input, self.p, &mut self.rng)?;
                self.mask = Some(mask);
                Ok(out)
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_forward("dropout"))?;
        ops::dropout_backward(mask, grad_out)
    }
}

/// Reshape to `[1, n]`; backward restores the input shape.
#[derive(Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self { input_shape: None }
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input_shape = Some(input.shape().to_vec());
        Ok(ops::flatten(input.clone()))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_forward("flatten"))?;
        grad_out.clone().reshape(shape)
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Parameters named `<prefix>.<layer index>.<param>`.
    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(name, t)| (format!("{prefix}.{i}.{name}"), t))
            })
            .collect()
    }
}
