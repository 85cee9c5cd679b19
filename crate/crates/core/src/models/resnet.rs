use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Mode, Module, Param, Real, Relu, Tensor};
use crate::seed::{rng, Purpose};

use super::Preset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Effective (stride, dilation) per stage for a requested output stride.
/// Trailing strides are traded for dilation, as in dilated ResNets.
pub(crate) fn stage_layout(preset: Preset, output_stride: usize) -> Result<Vec<(usize, usize)>> {
    let stages = preset.stages();
    let mut convert = vec![false; stages.len()];
    let mut current = preset.natural_stride();
    for i in (0..stages.len()).rev() {
        if current <= output_stride {
            break;
        }
        if stages[i].stride > 1 {
            convert[i] = true;
            current /= stages[i].stride;
        }
    }
    let mut dilation = 1;
    let layout = stages
        .iter()
        .zip(&convert)
        .map(|(s, &c)| {
            if c {
                dilation *= s.stride;
                (1, dilation)
            } else {
                (s.stride, dilation)
            }
        })
        .collect();
    if current != output_stride {
        return Err(Error::config(
            "model.output_stride",
            format!(
                "{} preset supports output strides dividing {} down to 2, got {output_stride}",
                preset.name(),
                preset.natural_stride()
            ),
        ));
    }
    Ok(layout)
}

#[derive(Clone, Debug)]
struct Downsample<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

/// Two 3×3 convolutions with a residual connection.
#[derive(Clone, Debug)]
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    down: Option<Downsample<T>>,
    relu_out: Relu,
}

impl<T: Real> BasicBlock<T> {
    fn new<R: rand::Rng + ?Sized>(inp: usize, out: usize, stride: usize, dilation: usize, rng: &mut R) -> Self {
        let down = (stride != 1 || inp != out).then(|| Downsample {
            conv: Conv2d::new(inp, out, 1, stride, 0, 1, false, rng),
            bn: BatchNorm2d::new(out),
        });
        Self {
            conv1: Conv2d::new(inp, out, 3, stride, dilation, dilation, false, rng),
            bn1: BatchNorm2d::new(out),
            relu1: Relu::default(),
            conv2: Conv2d::new(out, out, 3, 1, dilation, dilation, false, rng),
            bn2: BatchNorm2d::new(out),
            down,
            relu_out: Relu::default(),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = Relu::infer(&self.bn1.infer(&self.conv1.infer(x)));
        let mut h = self.bn2.infer(&self.conv2.infer(&h));
        match &self.down {
            Some(d) => h.add_assign(&d.bn.infer(&d.conv.infer(x))),
            None => h.add_assign(x),
        }
        Relu::infer(&h)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h, mode);
        match &mut self.down {
            Some(d) => {
                let s = d.conv.forward(x);
                h.add_assign(&d.bn.forward(&s, mode));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward(&h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dsum = self.relu_out.backward(dy);
        let g = self.bn2.backward(&dsum);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        match &mut self.down {
            Some(d) => {
                let s = d.bn.backward(&dsum);
                dx.add_assign(&d.conv.backward(&s));
            }
            None => dx.add_assign(&dsum),
        }
        dx
    }
}

impl<T: Real> Module<T> for BasicBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
        if let Some(d) = &self.down {
            d.conv.collect_params(&format!("{prefix}.downsample.conv"), out);
            d.bn.collect_params(&format!("{prefix}.downsample.bn"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv1.collect_params_mut(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params_mut(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params_mut(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params_mut(&format!("{prefix}.bn2"), out);
        if let Some(d) = &mut self.down {
            d.conv.collect_params_mut(&format!("{prefix}.downsample.conv"), out);
            d.bn.collect_params_mut(&format!("{prefix}.downsample.bn"), out);
        }
    }
}

/// Stride-2 stem followed by residual stages.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub preset: Preset,
    pub output_stride: usize,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu,
    stages: Vec<Vec<BasicBlock<T>>>,
}

impl<T: Real> Backbone<T> {
    pub fn new(preset: Preset, output_stride: usize, seed: u64) -> Result<Self> {
        let layout = stage_layout(preset, output_stride)?;
        let mut rng = rng(seed, Purpose::Init, &[]);
        let stem_c = preset.stem_channels();
        let k = preset.stem_kernel();
        let stem_conv = Conv2d::new(3, stem_c, k, 2, k / 2, 1, false, &mut rng);
        let mut inp = stem_c;
        let mut stages = Vec::new();
        for (spec, &(stride, dilation)) in preset.stages().iter().zip(&layout) {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks {
                let s = if b == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(inp, spec.channels, s, dilation, &mut rng));
                inp = spec.channels;
            }
            stages.push(blocks);
        }
        Ok(Self {
            preset,
            output_stride,
            stem_conv,
            stem_bn: BatchNorm2d::new(stem_c),
            stem_relu: Relu::default(),
            stages,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.preset.feature_channels()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = Relu::infer(&self.stem_bn.infer(&self.stem_conv.infer(x)));
        for block in self.stages.iter().flatten() {
            h = block.infer(&h);
        }
        h
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.stem_conv.forward(x);
        let h = self.stem_bn.forward(&h, mode);
        let mut h = self.stem_relu.forward(&h);
        for block in self.stages.iter_mut().flatten() {
            h = block.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for block in self.stages.iter_mut().flatten().rev() {
            g = block.backward(&g);
        }
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        self.stem_conv.backward(&g)
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.stem_conv.collect_params(&format!("{prefix}.stem.conv"), out);
        self.stem_bn.collect_params(&format!("{prefix}.stem.bn"), out);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.collect_params(&format!("{prefix}.layer{}.{b}", s + 1), out);
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.stem_conv.collect_params_mut(&format!("{prefix}.stem.conv"), out);
        self.stem_bn.collect_params_mut(&format!("{prefix}.stem.bn"), out);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.collect_params_mut(&format!("{prefix}.layer{}.{b}", s + 1), out);
            }
        }
    }
}
