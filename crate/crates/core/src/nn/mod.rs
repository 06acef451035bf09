//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Convolutional layers operate on `N x C x H x W` batches; dense layers on
//! `N x F` matrices. A layer caches what its backward pass needs only when the
//! forward pass ran in [`Pass::Train`].

mod activation;
mod conv;
mod dense;
mod init;
mod io;
mod norm;
mod optim;
mod pool;

use ndarray::{Array4, ArrayD};

pub use activation::{ChannelAffine, Relu};
pub use conv::Conv2d;
pub use dense::{flatten, Dropout, Linear, Relu2};
pub use init::{kaiming_normal_fan_out, uniform_fan_in};
pub use io::{load_state, read_tensors, write_tensors, TensorMap};
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamConfig};
pub use pool::{AdaptiveAvgPool2d, MaxPool2d};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics, dropout active, activations cached for backward.
    Train,
    /// Running statistics, no dropout, nothing cached.
    Infer,
}

/// A named tensor owned by a layer.
///
/// Buffers (`trainable == false`, e.g. batch-norm running statistics) are
/// persisted with the parameters but never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: Option<ArrayD<T>>,
    pub trainable: bool,
    pub buffer: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        Param {
            value,
            grad: None,
            trainable: true,
            buffer: false,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param {
            value,
            grad: None,
            trainable: false,
            buffer: true,
        }
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate(&mut self, g: ArrayD<T>) {
        match &mut self.grad {
            Some(acc) => *acc += &g,
            None => self.grad = Some(g),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits every parameter and buffer under a dotted name.
pub trait Parameterized<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

/// A layer over `N x C x H x W` batches.
pub trait Layer<T: Scalar>: Parameterized<T> + Send {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T>;

    /// Gradient w.r.t. the input of the last [`Pass::Train`] forward call;
    /// parameter gradients are accumulated along the way.
    fn backward(&mut self, grad: Array4<T>) -> Array4<T>;
}

/// Layers applied in order, each under its own name.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer<T>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Parameterized<T> for Sequential<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, layer) in &mut self.layers {
            layer.visit(&join(prefix, name), f);
        }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, mut x: Array4<T>, pass: Pass) -> Array4<T> {
        for (_, layer) in &mut self.layers {
            x = layer.forward(x, pass);
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        for (_, layer) in self.layers.iter_mut().rev() {
            grad = layer.backward(grad);
        }
        grad
    }
}

/// Collects `(name, value)` copies of every parameter and buffer.
pub fn snapshot<T: Scalar, M: Parameterized<T> + ?Sized>(m: &mut M, prefix: &str) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

pub fn zero_grad<T: Scalar, M: Parameterized<T> + ?Sized>(m: &mut M) {
    m.visit("", &mut |_, p| p.zero_grad());
}

pub fn parameter_count<T: Scalar, M: Parameterized<T> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if p.trainable {
            n += p.value.len()
        }
    });
    n
}

/// Marks every non-buffer parameter as trainable or frozen; values are untouched.
pub fn set_trainable<T: Scalar, M: Parameterized<T> + ?Sized>(m: &mut M, flag: bool) {
    m.visit("", &mut |_, p| {
        if !p.buffer {
            p.trainable = flag;
            if !flag {
                p.grad = None;
            }
        }
    });
}
