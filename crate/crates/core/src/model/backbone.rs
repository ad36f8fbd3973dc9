//! Convolutional backbones. Parameter names follow the torchvision
//! `state_dict` layout so converted pretrained weights load by name.

use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, linear, BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder};

use super::spec::{BackboneName, BackboneScale, BackboneSpec};
use super::Dropout;

pub enum Backbone {
    Vgg(Vgg),
    WideResnet(WideResnet),
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, vb: VarBuilder, dropout_seed: u64) -> Result<Self> {
        match spec.name {
            BackboneName::Vgg16Bn => Vgg::new(spec, vb, dropout_seed).map(Backbone::Vgg),
            BackboneName::WideResnet50 => WideResnet::new(spec, vb).map(Backbone::WideResnet),
        }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Backbone::Vgg(m) => m.forward_t(x, train),
            Backbone::WideResnet(m) => m.forward_t(x, train),
        }
    }
}

fn bn(channels: usize, vb: VarBuilder) -> Result<BatchNorm> {
    batch_norm(channels, 1e-5, vb)
}

/// 3x3 max-pool with stride 2 and padding 1. Expects non-negative input
/// (it follows a ReLU), so zero padding is equivalent to `-inf` padding.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    // Pad so that offset 2 plus 2 * out still fits.
    let x = x.pad_with_zeros(2, 1, 2 * oh + 1 - h)?.pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = stride2(&x.narrow(2, dy, 2 * oh)?, 2, oh)?;
        for dx in 0..3 {
            let cell = stride2(&rows.narrow(3, dx, 2 * ow)?, 3, ow)?;
            out = Some(match out {
                None => cell,
                Some(acc) => acc.maximum(&cell)?,
            });
        }
    }
    Ok(out.expect("nine taps"))
}

// Keeps every other element along `dim`, whose length is exactly 2 * n.
fn stride2(x: &Tensor, dim: usize, n: usize) -> Result<Tensor> {
    let mut dims = x.dims().to_vec();
    dims[dim] = n;
    dims.insert(dim + 1, 2);
    x.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

/// Average pooling with torchvision's adaptive window boundaries:
/// window `i` covers `floor(i * len / out) .. ceil((i + 1) * len / out)`.
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let pool_dim = |x: &Tensor, dim: usize, out: usize| -> Result<Tensor> {
        let len = x.dim(dim)?;
        if len == out {
            return Ok(x.clone());
        }
        let cells = (0..out)
            .map(|i| {
                let start = i * len / out;
                let end = ((i + 1) * len).div_ceil(out);
                x.narrow(dim, start, end - start)?.mean_keepdim(dim)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&cells, dim)
    };
    pool_dim(&pool_dim(x, 2, out_h)?, 3, out_w)
}

const VGG16_LAYOUT: [Option<usize>; 18] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), None,
];

enum VggLayer {
    ConvBn(Conv2d, BatchNorm),
    Pool,
}

pub struct Vgg {
    features: Vec<VggLayer>,
    classifier: [Linear; 3],
    dropout: [Dropout; 2],
}

impl Vgg {
    fn new(spec: &BackboneSpec, vb: VarBuilder, dropout_seed: u64) -> Result<Self> {
        let divisor = match spec.scale {
            BackboneScale::Full => 1,
            BackboneScale::Desk => 8,
        };
        let fvb = vb.pp("features");
        let mut features = Vec::new();
        let mut index = 0;
        let mut channels = 3;
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        for entry in VGG16_LAYOUT {
            match entry {
                Some(width) => {
                    let width = width / divisor;
                    let conv = conv2d(channels, width, 3, cfg, fvb.pp(index))?;
                    let norm = bn(width, fvb.pp(index + 1))?;
                    features.push(VggLayer::ConvBn(conv, norm));
                    channels = width;
                    index += 3;
                }
                None => {
                    features.push(VggLayer::Pool);
                    index += 1;
                }
            }
        }
        let hidden = 4096 / divisor;
        let cvb = vb.pp("classifier");
        let classifier = [
            linear(channels * 49, hidden, cvb.pp(0))?,
            linear(hidden, hidden, cvb.pp(3))?,
            linear(hidden, spec.output_dim, cvb.pp(6))?,
        ];
        Ok(Self {
            features,
            classifier,
            dropout: [Dropout::new(0.5, dropout_seed ^ 0x5647_4731), Dropout::new(0.5, dropout_seed ^ 0x5647_4732)],
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.features {
            x = match layer {
                VggLayer::ConvBn(conv, norm) => norm.forward_t(&conv.forward(&x)?, train)?.relu()?,
                VggLayer::Pool => x.max_pool2d(2)?,
            };
        }
        let x = adaptive_avg_pool2d(&x, 7, 7)?.flatten_from(1)?;
        let x = self.dropout[0].forward_t(&self.classifier[0].forward(&x)?.relu()?, train)?;
        let x = self.dropout[1].forward_t(&self.classifier[1].forward(&x)?.relu()?, train)?;
        self.classifier[2].forward(&x)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    const EXPANSION: usize = 4;
    // Wide variant: the inner 3x3 is twice the plain bottleneck width.
    const WIDEN: usize = 2;

    fn new(inplanes: usize, planes: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let width = planes * Self::WIDEN;
        let out = planes * Self::EXPANSION;
        let downsample = if stride != 1 || inplanes != out {
            let cfg = Conv2dConfig {
                stride,
                ..Default::default()
            };
            Some((conv2d_no_bias(inplanes, out, 1, cfg, vb.pp("downsample.0"))?, bn(out, vb.pp("downsample.1"))?))
        } else {
            None
        };
        Ok(Self {
            conv1: conv2d_no_bias(inplanes, width, 1, Default::default(), vb.pp("conv1"))?,
            bn1: bn(width, vb.pp("bn1"))?,
            conv2: conv2d_no_bias(
                width,
                width,
                3,
                Conv2dConfig {
                    stride,
                    padding: 1,
                    ..Default::default()
                },
                vb.pp("conv2"),
            )?,
            bn2: bn(width, vb.pp("bn2"))?,
            conv3: conv2d_no_bias(width, out, 1, Default::default(), vb.pp("conv3"))?,
            bn3: bn(out, vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward_t(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward_t(&self.conv3.forward(&y)?, train)?;
        let identity = match &self.downsample {
            Some((conv, norm)) => norm.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        (y + identity)?.relu()
    }
}

pub struct WideResnet {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<Bottleneck>>,
    fc: Linear,
}

impl WideResnet {
    fn new(spec: &BackboneSpec, vb: VarBuilder) -> Result<Self> {
        let (stem, planes, depths): (usize, [usize; 4], [usize; 4]) = match spec.scale {
            BackboneScale::Full => (64, [64, 128, 256, 512], [3, 4, 6, 3]),
            BackboneScale::Desk => (48, [48, 96, 192, 384], [1, 1, 1, 1]),
        };
        let conv1 = conv2d_no_bias(
            3,
            stem,
            7,
            Conv2dConfig {
                stride: 2,
                padding: 3,
                ..Default::default()
            },
            vb.pp("conv1"),
        )?;
        let bn1 = bn(stem, vb.pp("bn1"))?;
        let mut inplanes = stem;
        let mut layers = Vec::new();
        for (i, (&p, &depth)) in planes.iter().zip(&depths).enumerate() {
            let lvb = vb.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::new();
            for j in 0..depth {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(inplanes, p, stride, lvb.pp(j))?);
                inplanes = p * Bottleneck::EXPANSION;
            }
            layers.push(blocks);
        }
        let fc = linear(inplanes, spec.output_dim, vb.pp("fc"))?;
        Ok(Self { conv1, bn1, layers, fc })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for block in self.layers.iter().flatten() {
            x = block.forward_t(&x, train)?;
        }
        let x = x.mean(D::Minus1)?.mean(D::Minus1)?;
        self.fc.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn manual_max_pool_matches_brute_force() {
        for (h, w) in [(7, 6), (8, 9), (5, 5)] {
            let vals: Vec<f32> = (0..2 * h * w).map(|i| ((i * 37) % 23) as f32).collect();
            let x = Tensor::from_vec(vals.clone(), (1, 2, h, w), &Device::Cpu).unwrap();
            let y = max_pool_3x3_s2(&x).unwrap();
            let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
            assert_eq!(y.dims(), [1, 2, oh, ow]);
            let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for c in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f32::MIN;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = ((2 * oy + ky) as i64 - 1, (2 * ox + kx) as i64 - 1);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    m = m.max(vals[c * h * w + iy as usize * w + ix as usize]);
                                }
                            }
                        }
                        assert_eq!(got[(c * oh + oy) * ow + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_windows() {
        let x = Tensor::arange(0f32, 9.0, &Device::Cpu).unwrap().reshape((1, 1, 1, 9)).unwrap();
        let y = adaptive_avg_pool2d(&x, 1, 7).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Windows over 9 -> 7: [0,2) [1,3) [2,4) [3,6) [5,7) [6,8) [7,9).
        assert_eq!(y, vec![0.5, 1.5, 2.5, 4.0, 5.5, 6.5, 7.5]);
        let z = Tensor::ones((2, 3, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(adaptive_avg_pool2d(&z, 7, 7).unwrap().dims(), [2, 3, 7, 7]);
    }
}
