use rand::Rng;

use super::{gemm, join, Module, Param, Real, Tensor};

/// 2D convolution (im2col + GEMM) with stride, zero padding and dilation.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input_shape: [usize; 4],
    /// Per-sample column matrices (`None` for 1×1/stride-1/no-pad convs,
    /// whose columns are the input itself).
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::fan_in_normal(vec![out_channels, in_channels, kernel, kernel], fan_in, 2.0, rng);
        let bias = bias.then(|| Param::filled(vec![out_channels], T::zero()));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let f = |d: usize| (d + 2 * self.padding - span) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor<T>, keep_cols: bool) -> (Tensor<T>, Vec<T>) {
        assert_eq!(x.c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_size(x.h, x.w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut y = Tensor::zeros(x.n, self.out_channels, oh, ow);
        let pointwise = self.is_pointwise();
        let mut all_cols = if keep_cols && !pointwise {
            vec![T::zero(); x.n * ckk * ohw]
        } else {
            Vec::new()
        };
        let mut scratch = if pointwise || keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); ckk * ohw]
        };
        for i in 0..x.n {
            let cols: &[T] = if pointwise {
                x.sample(i)
            } else if keep_cols {
                let c = &mut all_cols[i * ckk * ohw..(i + 1) * ckk * ohw];
                self.im2col(x.sample(i), x.h, x.w, oh, ow, c);
                c
            } else {
                self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut scratch);
                &scratch
            };
            let out = y.sample_mut(i);
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.iter().enumerate() {
                    out[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = bv);
                }
            }
            gemm(
                self.out_channels,
                ckk,
                ohw,
                &self.weight.value,
                false,
                cols,
                false,
                T::one(),
                out,
            );
        }
        (y, all_cols)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x, false).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, cols) = self.compute(x, true);
        let cols = if self.is_pointwise() { x.data.clone() } else { cols };
        self.cache = Some(ConvCache {
            input_shape: x.shape(),
            cols,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward without forward");
        let [n, c, h, w] = cache.input_shape;
        let (oh, ow) = (dy.h, dy.w);
        let ohw = oh * ow;
        let ckk = c * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(n, c, h, w);
        let mut dcols = vec![T::zero(); ckk * ohw];
        let pointwise = self.is_pointwise();
        for i in 0..n {
            let dyi = dy.sample(i);
            let cols = &cache.cols[i * ckk * ohw..(i + 1) * ckk * ohw];
            // dW += dY · colsᵀ
            gemm(
                self.out_channels,
                ohw,
                ckk,
                dyi,
                false,
                cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for (o, g) in b.grad.iter_mut().enumerate() {
                    *g += dyi[o * ohw..(o + 1) * ohw].iter().copied().sum::<T>();
                }
            }
            if pointwise {
                gemm(
                    ckk,
                    self.out_channels,
                    ohw,
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    T::zero(),
                    dx.sample_mut(i),
                );
            } else {
                gemm(
                    ckk,
                    self.out_channels,
                    ohw,
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}
