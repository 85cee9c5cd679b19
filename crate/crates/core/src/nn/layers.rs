use rand::Rng;

use super::{gemm, join, Module, Param, Real, Tensor};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn infer<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        y
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = x.data.iter().map(|&v| v > T::zero()).collect();
        Self::infer(x)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        for (g, &a) in dx.data.iter_mut().zip(&self.active) {
            if !a {
                *g = T::zero();
            }
        }
        dx
    }
}

/// Spatial mean per channel: `N×C×H×W → N×C×1×1`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: [usize; 4],
}

impl GlobalAvgPool {
    pub fn infer<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let hw = x.h * x.w;
        let inv = T::from_usize(hw).unwrap().recip();
        let data = x.data.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_vec(x.n, x.c, 1, 1, data)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input_shape = x.shape();
        Self::infer(x)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.input_shape;
        let inv = T::from_usize(h * w).unwrap().recip();
        let mut data = Vec::with_capacity(n * c * h * w);
        for &g in &dy.data {
            data.extend(std::iter::repeat_n(g * inv, h * w));
        }
        Tensor::from_vec(n, c, h, w, data)
    }
}

/// Affine map on `N×C×1×1` inputs.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::fan_in_normal(vec![out_features, in_features], in_features, 1.0, rng),
            bias: Param::filled(vec![out_features], T::zero()),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_features, "linear input size mismatch");
        let mut y = Tensor::zeros(x.n, self.out_features, 1, 1);
        for i in 0..x.n {
            y.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        // Y (n×out) = X (n×in) · Wᵀ
        gemm(
            x.n,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            T::one(),
            &mut y.data,
        );
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward");
        let n = x.n;
        // dW (out×in) += dYᵀ · X
        gemm(
            self.out_features,
            n,
            self.in_features,
            &dy.data,
            true,
            &x.data,
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for i in 0..n {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(
            n,
            self.out_features,
            self.in_features,
            &dy.data,
            false,
            &self.weight.value,
            false,
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Bilinear resize of feature maps (half-pixel centres, edge clamped).
#[derive(Clone, Debug, Default)]
pub struct Upsample {
    input_shape: [usize; 4],
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    f: f64,
}

fn taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                f: src - i0 as f64,
            }
        })
        .collect()
}

impl Upsample {
    pub fn infer<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
        let ty = taps(out_h, x.h);
        let tx = taps(out_w, x.w);
        let mut y = Tensor::zeros(x.n, x.c, out_h, out_w);
        for plane in 0..x.n * x.c {
            let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
            let dst = &mut y.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, a) in ty.iter().enumerate() {
                let fy = T::lit(a.f);
                for (ox, b) in tx.iter().enumerate() {
                    let fx = T::lit(b.f);
                    let p = |yy: usize, xx: usize| src[yy * x.w + xx];
                    let top = p(a.i0, b.i0) * (T::one() - fx) + p(a.i0, b.i1) * fx;
                    let bot = p(a.i1, b.i0) * (T::one() - fx) + p(a.i1, b.i1) * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        y
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
        self.input_shape = x.shape();
        Self::infer(x, out_h, out_w)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.input_shape;
        let ty = taps(dy.h, h);
        let tx = taps(dy.w, w);
        let mut dx = Tensor::zeros(n, c, h, w);
        for plane in 0..n * c {
            let g = &dy.data[plane * dy.h * dy.w..(plane + 1) * dy.h * dy.w];
            let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for (oy, a) in ty.iter().enumerate() {
                let fy = T::lit(a.f);
                for (ox, b) in tx.iter().enumerate() {
                    let fx = T::lit(b.f);
                    let v = g[oy * dy.w + ox];
                    dst[a.i0 * w + b.i0] += v * (T::one() - fy) * (T::one() - fx);
                    dst[a.i0 * w + b.i1] += v * (T::one() - fy) * fx;
                    dst[a.i1 * w + b.i0] += v * fy * (T::one() - fx);
                    dst[a.i1 * w + b.i1] += v * fy * fx;
                }
            }
        }
        dx
    }
}
