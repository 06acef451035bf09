use ndarray::{concatenate, s, Array4, Axis};
use rand::Rng;

use crate::nn::{join, BatchNorm2d, Conv2d, Layer, MaxPool2d, Param, Parameterized, Pass, Relu, Sequential};
use crate::scalar::Scalar;

/// conv (no bias) -> batch norm -> ReLU, named `conv`, `bn`.
pub(crate) fn basic_conv<T: Scalar, R: Rng + ?Sized>(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bn_eps: f64,
    rng: &mut R,
) -> Sequential<T> {
    Sequential::new()
        .push("conv", Conv2d::new(cin, cout, k, stride, pad, 1, false, rng))
        .push("bn", BatchNorm2d::new(cout, bn_eps))
        .push("relu", Relu::new())
}

/// 1x1 -> 3x3 -> 1x1 residual block with 4x channel expansion; the stride
/// sits on the 3x3 convolution.
pub(crate) struct Bottleneck<T> {
    main: Sequential<T>,
    downsample: Option<Sequential<T>>,
    out_relu: Relu<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        let main = Sequential::new()
            .push("conv1", Conv2d::new(cin, width, 1, 1, 0, 1, false, rng))
            .push("bn1", BatchNorm2d::new(width, 1e-5))
            .push("relu1", Relu::new())
            .push("conv2", Conv2d::new(width, width, 3, stride, 1, 1, false, rng))
            .push("bn2", BatchNorm2d::new(width, 1e-5))
            .push("relu2", Relu::new())
            .push("conv3", Conv2d::new(width, cout, 1, 1, 0, 1, false, rng))
            .push("bn3", BatchNorm2d::new(cout, 1e-5));
        let downsample = (stride != 1 || cin != cout).then(|| {
            Sequential::new()
                .push("0", Conv2d::new(cin, cout, 1, stride, 0, 1, false, rng))
                .push("1", BatchNorm2d::new(cout, 1e-5))
        });
        Bottleneck {
            main,
            downsample,
            out_relu: Relu::new(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Bottleneck<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.main.visit(prefix, f);
        if let Some(d) = &mut self.downsample {
            d.visit(&join(prefix, "downsample"), f);
        }
    }
}

impl<T: Scalar> Layer<T> for Bottleneck<T> {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T> {
        let identity = match &mut self.downsample {
            Some(d) => d.forward(x.clone(), pass),
            None => x.clone(),
        };
        let out = self.main.forward(x, pass) + identity;
        self.out_relu.forward(out, pass)
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let g = self.out_relu.backward(grad);
        let g_id = match &mut self.downsample {
            Some(d) => d.backward(g.clone()),
            None => g.clone(),
        };
        self.main.backward(g) + g_id
    }
}

/// Four parallel branches concatenated along channels.
pub(crate) struct Inception<T> {
    branches: Vec<(&'static str, Sequential<T>)>,
    widths: Vec<usize>,
}

impl<T: Scalar> Inception<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        ch1: usize,
        ch3_red: usize,
        ch3: usize,
        ch5_red: usize,
        ch5: usize,
        pool_proj: usize,
        rng: &mut R,
    ) -> Self {
        let eps = 1e-3;
        let branch1 = basic_conv(cin, ch1, 1, 1, 0, eps, rng);
        let mut branch2 = Sequential::new();
        branch2.push_boxed("0", Box::new(basic_conv::<T, R>(cin, ch3_red, 1, 1, 0, eps, rng)));
        branch2.push_boxed("1", Box::new(basic_conv::<T, R>(ch3_red, ch3, 3, 1, 1, eps, rng)));
        // The widely distributed weights use a 3x3 kernel in this branch too.
        let mut branch3 = Sequential::new();
        branch3.push_boxed("0", Box::new(basic_conv::<T, R>(cin, ch5_red, 1, 1, 0, eps, rng)));
        branch3.push_boxed("1", Box::new(basic_conv::<T, R>(ch5_red, ch5, 3, 1, 1, eps, rng)));
        let mut branch4 = Sequential::new().push("0", MaxPool2d::new(3, 1, 1, true));
        branch4.push_boxed("1", Box::new(basic_conv::<T, R>(cin, pool_proj, 1, 1, 0, eps, rng)));
        Inception {
            branches: vec![
                ("branch1", branch1),
                ("branch2", branch2),
                ("branch3", branch3),
                ("branch4", branch4),
            ],
            widths: vec![ch1, ch3, ch5, pool_proj],
        }
    }

    #[cfg(test)]
    pub fn out_channels(&self) -> usize {
        self.widths.iter().sum()
    }
}

impl<T: Scalar> Parameterized<T> for Inception<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, b) in &mut self.branches {
            b.visit(&join(prefix, name), f);
        }
    }
}

impl<T: Scalar> Layer<T> for Inception<T> {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T> {
        let outs: Vec<Array4<T>> = self
            .branches
            .iter_mut()
            .map(|(_, b)| b.forward(x.clone(), pass))
            .collect();
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        concatenate(Axis(1), &views).expect("branch outputs share spatial size")
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let mut start = 0;
        let mut dx: Option<Array4<T>> = None;
        for ((_, b), &w) in self.branches.iter_mut().zip(&self.widths) {
            let g = grad.slice(s![.., start..start + w, .., ..]).to_owned();
            start += w;
            let d = b.backward(g);
            dx = Some(match dx {
                Some(acc) => acc + d,
                None => d,
            });
        }
        dx.expect("four branches")
    }
}
