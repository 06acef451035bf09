use ndarray::{Array4, Axis, Zip};

use super::{Layer, Param, Parameterized, Pass};
use crate::scalar::Scalar;

#[derive(Default)]
pub struct Relu<T> {
    mask: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<T: Scalar> Parameterized<T> for Relu<T> {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, mut x: Array4<T>, pass: Pass) -> Array4<T> {
        x.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
        if pass == Pass::Train {
            self.mask = Some(x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() }));
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        let mask = self.mask.take().expect("relu backward without a training forward");
        Zip::from(&mut grad).and(&mask).for_each(|g, &m| *g *= m);
        grad
    }
}

/// Fixed per-channel `x * scale + shift` (no parameters).
pub struct ChannelAffine<T> {
    scale: [T; 3],
    shift: [T; 3],
}

impl<T: Scalar> ChannelAffine<T> {
    pub fn new(scale: [f64; 3], shift: [f64; 3]) -> Self {
        ChannelAffine {
            scale: scale.map(T::lit),
            shift: shift.map(T::lit),
        }
    }
}

impl<T: Scalar> Parameterized<T> for ChannelAffine<T> {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for ChannelAffine<T> {
    fn forward(&mut self, mut x: Array4<T>, _: Pass) -> Array4<T> {
        for c in 0..x.dim().1.min(3) {
            let (s, b) = (self.scale[c], self.shift[c]);
            x.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s + b);
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        for c in 0..grad.dim().1.min(3) {
            let s = self.scale[c];
            grad.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s);
        }
        grad
    }
}
