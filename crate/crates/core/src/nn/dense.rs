use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Zip};
use rand::Rng;

use super::{init::uniform_fan_in, join, Param, Parameterized, Pass};
use crate::scalar::Scalar;

/// Fully connected layer; `weight` is stored `[out, in]`.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(uniform_fan_in(&[out_features, in_features], in_features, rng)),
            bias: Param::new(uniform_fan_in(&[out_features], in_features, rng)),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&mut self, x: &Array2<T>, pass: Pass) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_features(), "linear input width");
        let mut y = x.dot(&self.w().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        if pass == Pass::Train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without a training forward");
        let dw = grad.t().dot(&x);
        let db = grad.sum_axis(Axis(0));
        let dx = grad.dot(&self.w());
        self.weight.accumulate(dw.into_dyn());
        self.bias.accumulate(db.into_dyn());
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// ReLU over `N x F` matrices.
#[derive(Default)]
pub struct Relu2 {
    mask: Option<Array2<bool>>,
}

impl Relu2 {
    pub fn new() -> Self {
        Relu2 { mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, mut x: Array2<T>, pass: Pass) -> Array2<T> {
        if pass == Pass::Train {
            self.mask = Some(x.mapv(|v| v > T::zero()));
        }
        x.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
        x
    }

    pub fn backward<T: Scalar>(&mut self, mut grad: Array2<T>) -> Array2<T> {
        let mask = self.mask.take().expect("relu backward without a training forward");
        Zip::from(&mut grad).and(&mask).for_each(|g, &m| {
            if !m {
                *g = T::zero()
            }
        });
        grad
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` in training.
pub struct Dropout<T> {
    p: f64,
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Dropout { p, mask: None }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: Array2<T>, pass: Pass, rng: &mut R) -> Array2<T> {
        if pass == Pass::Infer || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
            if rng.random::<f64>() < self.p {
                T::zero()
            } else {
                keep
            }
        });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad: Array2<T>) -> Array2<T> {
        match self.mask.take() {
            Some(mask) => grad * &mask,
            None => grad,
        }
    }
}

/// Reshapes `N x C x 1 x 1` (or any `N x ...`) activations into `N x F`.
pub fn flatten<T: Scalar>(x: ArrayD<T>) -> Array2<T> {
    let n = x.shape()[0];
    let f = x.len() / n.max(1);
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, f]))
        .expect("contiguous")
        .into_dimensionality::<Ix2>()
        .expect("2-d")
}
