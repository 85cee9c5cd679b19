use super::{join, Mode, Module, Param, Real, Tensor};

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            weight: Param::filled(vec![channels], T::one()),
            bias: Param::filled(vec![channels], T::zero()),
            running_mean: Param::buffer(vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(vec![channels], vec![T::one(); channels]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let hw = x.h * x.w;
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for c in 0..x.c {
                let off = (n * x.c + c) * hw;
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                for p in off..off + hw {
                    let v = (x.data[p] - mean[c]) * inv_std[c];
                    xhat.data[p] = v;
                    y.data[p] = g * v + b;
                }
            }
        }
        (y, xhat)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var
            .value
            .iter()
            .map(|&v| (v + eps).sqrt().recip())
            .collect()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.normalize(x, &self.running_mean.value, &self.running_inv_std()).0
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "batch-norm channel mismatch");
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Eval => (self.running_mean.value.clone(), self.running_inv_std(), false),
            Mode::Train => {
                let hw = x.h * x.w;
                let count = (x.n * hw) as f64;
                let mut mean = vec![T::zero(); x.c];
                let mut var = vec![T::zero(); x.c];
                for c in 0..x.c {
                    let mut s = 0.0f64;
                    for n in 0..x.n {
                        let off = (n * x.c + c) * hw;
                        s += x.data[off..off + hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0f64;
                    for n in 0..x.n {
                        let off = (n * x.c + c) * hw;
                        ss += x.data[off..off + hw]
                            .iter()
                            .map(|v| (v.to_f64().unwrap() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[c] = T::lit(m);
                    var[c] = T::lit(ss / count);
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { ss };
                    let mo = self.momentum;
                    let rm = self.running_mean.value[c].to_f64().unwrap();
                    let rv = self.running_var.value[c].to_f64().unwrap();
                    self.running_mean.value[c] = T::lit((1.0 - mo) * rm + mo * m);
                    self.running_var.value[c] = T::lit((1.0 - mo) * rv + mo * unbiased);
                }
                let eps = T::lit(self.eps);
                let inv_std = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                (mean, inv_std, true)
            }
        };
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward without forward");
        let xhat = &cache.xhat;
        let hw = dy.h * dy.w;
        let m = T::from_usize(dy.n * hw).unwrap();
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..dy.n {
                let off = (n * dy.c + c) * hw;
                for p in off..off + hw {
                    sum_dy += dy.data[p];
                    sum_dy_xhat += dy.data[p] * xhat.data[p];
                }
            }
            self.weight.grad[c] += sum_dy_xhat;
            self.bias.grad[c] += sum_dy;
            let g = self.weight.value[c] * cache.inv_std[c];
            for n in 0..dy.n {
                let off = (n * dy.c + c) * hw;
                for p in off..off + hw {
                    dx.data[p] = if cache.batch_stats {
                        g * (dy.data[p] - sum_dy / m - xhat.data[p] * sum_dy_xhat / m)
                    } else {
                        g * dy.data[p]
                    };
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
