use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// He-normal initialization with `fan_out = shape[0] * prod(shape[2..])`, ReLU gain.
pub fn kaiming_normal_fan_out<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<T> {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = (shape[0] * receptive).max(1) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(normal.sample(rng)))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for dense layers.
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("ordered bounds");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}
