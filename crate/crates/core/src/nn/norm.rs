use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{join, Layer, Param, Parameterized, Pass};
use crate::scalar::Scalar;

/// Per-channel batch normalization over `N, H, W`.
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    momentum: f64,
    cache: Option<(Array4<T>, Array1<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), T::one());
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        BatchNorm2d {
            weight: Param::new(ones()),
            bias: Param::new(zeros()),
            running_mean: Param::buffer(zeros()),
            running_var: Param::buffer(ones()),
            eps,
            momentum: 0.1,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.weight.value.len()
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, mut x: Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let eps = T::lit(self.eps);
        match pass {
            Pass::Infer => {
                for ci in 0..c {
                    let inv = T::one() / (self.running_var.value[[ci]] + eps).sqrt();
                    let (m, g, b) = (self.running_mean.value[[ci]], self.weight.value[[ci]], self.bias.value[[ci]]);
                    x.index_axis_mut(Axis(1), ci)
                        .mapv_inplace(|v| (v - m) * inv * g + b);
                }
                x
            }
            Pass::Train => {
                let count = (n * h * w) as f64;
                let mut inv_std = Array1::zeros(c);
                let mom = T::lit(self.momentum);
                for ci in 0..c {
                    let mut plane = x.index_axis_mut(Axis(1), ci);
                    let mean = plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / count;
                    let var = plane
                        .iter()
                        .map(|v| (v.to_f64_lossy() - mean).powi(2))
                        .sum::<f64>()
                        / count;
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std[ci] = T::lit(inv);
                    let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
                    plane.mapv_inplace(|v| (v - mean_t) * inv_t);
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    let rm = &mut self.running_mean.value[[ci]];
                    *rm = (T::one() - mom) * *rm + mom * mean_t;
                    let rv = &mut self.running_var.value[[ci]];
                    *rv = (T::one() - mom) * *rv + mom * T::lit(unbiased);
                }
                let x_hat = x.clone();
                for ci in 0..c {
                    let (g, b) = (self.weight.value[[ci]], self.bias.value[[ci]]);
                    x.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
                }
                self.cache = Some((x_hat, inv_std));
                x
            }
        }
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (x_hat, inv_std) = self.cache.take().expect("batch-norm backward without a training forward");
        let (n, c, h, w) = grad.dim();
        let m = T::lit((n * h * w) as f64);
        let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
        let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g = grad.index_axis(Axis(1), ci);
            let xh = x_hat.index_axis(Axis(1), ci);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            dgamma[[ci]] = sum_gx;
            dbeta[[ci]] = sum_g;
            let k = self.weight.value[[ci]] * inv_std[ci] / m;
            let mut d = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut d)
                .and(&g)
                .and(&xh)
                .for_each(|d, &gv, &xv| *d = k * (m * gv - sum_g - xv * sum_gx));
        }
        self.weight.accumulate(dgamma);
        self.bias.accumulate(dbeta);
        dx
    }
}
