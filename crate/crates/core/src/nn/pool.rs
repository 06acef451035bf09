use ndarray::Array4;

use super::{Layer, Param, Parameterized, Pass};
use crate::scalar::Scalar;

/// Max pooling; `ceil_mode` rounds the output size up, as some zoo models do.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    ceil_mode: bool,
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize, ceil_mode: bool) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            ceil_mode,
            argmax: None,
        }
    }

    pub fn out_len(&self, n: usize) -> usize {
        let span = n + 2 * self.padding - self.kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // The last window must start inside the input or left padding.
        if self.ceil_mode && (out - 1) * self.stride >= n + self.padding {
            out -= 1;
        }
        out
    }
}

impl<T: Scalar> Parameterized<T> for MaxPool2d {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let mut out = Array4::from_elem((n, c, oh, ow), T::neg_infinity());
        let mut arg = vec![0usize; n * c * oh * ow];
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let p = self.padding as isize;
        let os = out.as_slice_mut().expect("fresh array");
        for (plane_idx, (src, dst)) in xs.chunks(h * w).zip(os.chunks_mut(oh * ow)).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * self.stride) as isize - p;
                    let x0 = (ox * self.stride) as isize - p;
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..self.kernel as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best_i == usize::MAX || src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    arg[(plane_idx * oh + oy) * ow + ox] = best_i;
                }
            }
        }
        self.argmax = (pass == Pass::Train).then_some((arg, (n, c, h, w)));
        out
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (arg, (n, c, h, w)) = self.argmax.take().expect("max-pool backward without a training forward");
        let (_, _, oh, ow) = grad.dim();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let g = grad.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let ds = dx.as_slice_mut().expect("fresh array");
        for plane in 0..n * c {
            for o in 0..oh * ow {
                let i = arg[plane * oh * ow + o];
                if i != usize::MAX {
                    ds[plane * h * w + i] += gs[plane * oh * ow + o];
                }
            }
        }
        dx
    }
}

/// Average pooling onto a fixed output grid, using the same bin boundaries as
/// the common deep-learning frameworks (`floor(i*H/o)` to `ceil((i+1)*H/o)`).
pub struct AdaptiveAvgPool2d {
    out: (usize, usize),
    in_dims: Option<(usize, usize, usize, usize)>,
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        AdaptiveAvgPool2d {
            out: (out_h, out_w),
            in_dims: None,
        }
    }

    pub fn global() -> Self {
        Self::new(1, 1)
    }

    fn bins(n: usize, o: usize) -> Vec<(usize, usize)> {
        (0..o).map(|i| (i * n / o, ((i + 1) * n).div_ceil(o))).collect()
    }
}

impl<T: Scalar> Parameterized<T> for AdaptiveAvgPool2d {
    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for AdaptiveAvgPool2d {
    fn forward(&mut self, x: Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out;
        if (oh, ow) == (h, w) {
            self.in_dims = (pass == Pass::Train).then_some((n, c, h, w));
            return x;
        }
        let (by, bx) = (Self::bins(h, oh), Self::bins(w, ow));
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ci in 0..c {
                for (oy, &(y0, y1)) in by.iter().enumerate() {
                    for (ox, &(x0, x1)) in bx.iter().enumerate() {
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += x[[i, ci, y, xx]];
                            }
                        }
                        out[[i, ci, oy, ox]] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
        }
        self.in_dims = (pass == Pass::Train).then_some((n, c, h, w));
        out
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (n, c, h, w) = self.in_dims.take().expect("avg-pool backward without a training forward");
        let (oh, ow) = self.out;
        if (oh, ow) == (h, w) {
            return grad;
        }
        let (by, bx) = (Self::bins(h, oh), Self::bins(w, ow));
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                for (oy, &(y0, y1)) in by.iter().enumerate() {
                    for (ox, &(x0, x1)) in bx.iter().enumerate() {
                        let g = grad[[i, ci, oy, ox]] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                dx[[i, ci, y, xx]] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
