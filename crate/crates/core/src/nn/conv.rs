use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, IxDyn};
use rand::Rng;

use super::{init, join, Layer, Param, Parameterized, Pass};
use crate::scalar::Scalar;

/// 2-D convolution (cross-correlation) with optional bias and channel groups.
///
/// Weight layout is `[out, in / groups, kh, kw]`.
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(groups > 0 && in_channels % groups == 0 && out_channels % groups == 0);
        let shape = [out_channels, in_channels / groups, kernel, kernel];
        let weight = Param::new(init::kaiming_normal_fan_out(&shape, rng));
        let bias = bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[out_channels]))));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
            input: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }

    fn col_rows(&self) -> usize {
        (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }

    /// `[cin * kh * kw, oh * ow]` patch matrix of one sample's channel slice.
    fn im2col(&self, x: ArrayView3<'_, T>, oh: usize, ow: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        let mut cols = Array2::zeros((c * kh * kw, oh * ow));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * sh) as isize + ki as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * sw) as isize + kj as isize - pw;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<'_, T>, mut dx: ArrayViewMut3<'_, T>, oh: usize, ow: usize) {
        let (c, h, w) = dx.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = (oy * sh) as isize + ki as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw) as isize + kj as isize - pw;
                            if ix >= 0 && ix < w as isize {
                                dx[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.col_rows()))
            .expect("contiguous weight")
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let g = self.groups;
        let (cin_g, cout_g) = (self.in_channels / g, self.out_channels / g);
        let wm = self.weight_matrix();
        let mut out = Array4::zeros((n, self.out_channels, oh, ow));
        for i in 0..n {
            for gi in 0..g {
                let xs = x.slice(s![i, gi * cin_g..(gi + 1) * cin_g, .., ..]);
                let cols = self.im2col(xs, oh, ow);
                let wg = wm.slice(s![gi * cout_g..(gi + 1) * cout_g, ..]);
                let y = wg.dot(&cols);
                out.slice_mut(s![i, gi * cout_g..(gi + 1) * cout_g, .., ..])
                    .assign(&y.into_shape_with_order((cout_g, oh, ow)).expect("gemm output"));
            }
        }
        if let Some(b) = &self.bias {
            for (oc, &bv) in b.value.iter().enumerate() {
                out.slice_mut(s![.., oc, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        self.input = (pass == Pass::Train).then_some(x);
        out
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("conv backward without a training forward");
        let (n, _, h, w) = x.dim();
        let (_, _, oh, ow) = grad.dim();
        let g = self.groups;
        let (cin_g, cout_g) = (self.in_channels / g, self.out_channels / g);
        let mut dw = Array2::<T>::zeros((self.out_channels, self.col_rows()));
        let mut dx = Array4::zeros((n, self.in_channels, h, w));
        {
            let wm = self.weight_matrix();
            for i in 0..n {
                for gi in 0..g {
                    let xs = x.slice(s![i, gi * cin_g..(gi + 1) * cin_g, .., ..]);
                    let cols = self.im2col(xs, oh, ow);
                    let go = grad.slice(s![i, gi * cout_g..(gi + 1) * cout_g, .., ..]);
                    let go = go.as_standard_layout();
                    let go = go.view().into_shape_with_order((cout_g, oh * ow)).expect("grad layout");
                    let mut dwg = dw.slice_mut(s![gi * cout_g..(gi + 1) * cout_g, ..]);
                    dwg += &go.dot(&cols.t());
                    let wg = wm.slice(s![gi * cout_g..(gi + 1) * cout_g, ..]);
                    let dcols = wg.t().dot(&go);
                    let dxs = dx.slice_mut(s![i, gi * cin_g..(gi + 1) * cin_g, .., ..]);
                    self.col2im(dcols.view(), dxs, oh, ow);
                }
            }
        }
        let shape = self.weight.value.shape().to_vec();
        self.weight
            .accumulate(dw.into_shape_with_order(IxDyn(&shape)).expect("weight shape"));
        if let Some(b) = &mut self.bias {
            let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            b.accumulate(db.into_dyn());
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = conv.out_size(h, w);
        let (kh, kw) = conv.kernel;
        let g = conv.groups;
        let (cin_g, cout_g) = (conv.in_channels / g, conv.out_channels / g);
        let mut out = Array4::zeros((n, conv.out_channels, oh, ow));
        for i in 0..n {
            for oc in 0..conv.out_channels {
                let gi = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[[oc]]);
                        for ci in 0..cin_g {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * conv.stride.0 + ki) as isize - conv.padding.0 as isize;
                                    let ix = (ox * conv.stride.1 + kj) as isize - conv.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[[oc, ci, ki, kj]]
                                            * x[[i, gi * cin_g + ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[i, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(cin, cout, k, s, p, g, bias) in &[
            (3, 4, 3, 1, 1, 1, true),
            (4, 6, 3, 2, 1, 2, false),
            (4, 4, 3, 1, 1, 4, false),
            (2, 3, 1, 1, 0, 1, true),
            (3, 2, 7, 2, 3, 1, false),
        ] {
            let mut conv = Conv2d::<f64>::new(cin, cout, k, s, p, g, bias, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            }
            let x = random((2, cin, 9, 8), &mut rng);
            let y = conv.forward(x.clone(), Pass::Infer);
            let y_ref = naive(&conv, &x);
            for (a, b) in y.iter().zip(y_ref.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(4, 4, 3, 2, 1, 2, true, &mut rng);
        let x = random((2, 4, 5, 6), &mut rng);
        let y = conv.forward(x.clone(), Pass::Train);
        let r = random(y.dim(), &mut rng);
        // loss = sum(r * y)
        let dx = conv.backward(r.clone());
        let dw = conv.weight.grad.clone().unwrap();
        let loss = |conv: &mut Conv2d<f64>, x: &Array4<f64>| (conv.forward(x.clone(), Pass::Infer) * &r).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [3, 1, 2, 1], [2, 0, 1, 2]] {
            let orig = conv.weight.value[IxDyn(&idx)];
            conv.weight.value[IxDyn(&idx)] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value[IxDyn(&idx)] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value[IxDyn(&idx)] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dw[IxDyn(&idx)]).abs() < 1e-6, "{fd} vs {}", dw[IxDyn(&idx)]);
        }
        for idx in [[0, 0, 0, 0], [1, 3, 4, 5], [0, 2, 2, 3]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
        let db = conv.bias.as_ref().unwrap().grad.clone().unwrap();
        assert!((db[[1]] - r.slice(s![.., 1, .., ..]).sum()).abs() < 1e-12);
    }
}
