//! ResNet-50 (v1.5, stride on the 3×3 conv) with torchvision parameter names.

use candle_core::Tensor;
use candle_nn::VarBuilder;

use super::layers::{bn, conv, max_pool_3x3_s2, ConvBn};
use super::Backbone;

const LAYERS: [usize; 4] = [3, 4, 6, 3];
const EXPANSION: usize = 4;
pub(crate) const FEATURE_DIM: usize = 2048;

#[derive(Debug)]
struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(vb: VarBuilder, c_in: usize, width: usize, stride: usize) -> candle_core::Result<Self> {
        let c_out = width * EXPANSION;
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(
                conv(vb.pp("downsample.0"), c_in, c_out, 1, stride, 0, 1, false)?,
                bn(vb.pp("downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(
                conv(vb.pp("conv1"), c_in, width, 1, 1, 0, 1, false)?,
                bn(vb.pp("bn1"), width)?,
            ),
            b: ConvBn::new(
                conv(vb.pp("conv2"), width, width, 3, stride, 1, 1, false)?,
                bn(vb.pp("bn2"), width)?,
            ),
            c: ConvBn::new(
                conv(vb.pp("conv3"), width, c_out, 1, 1, 0, 1, false)?,
                bn(vb.pp("bn3"), c_out)?,
            ),
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = self.a.forward_t(x, train)?.relu()?;
        let y = self.b.forward_t(&y, train)?.relu()?;
        let y = self.c.forward_t(&y, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

#[derive(Debug)]
pub(crate) struct ResNet50 {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub(crate) fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let stem = ConvBn::new(conv(vb.pp("conv1"), 3, 64, 7, 2, 3, 1, false)?, bn(vb.pp("bn1"), 64)?);
        let mut c_in = 64;
        let mut layers = Vec::new();
        for (i, &n) in LAYERS.iter().enumerate() {
            let width = 64 << i;
            let stage_vb = vb.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::with_capacity(n);
            for j in 0..n {
                let stride = if j == 0 && i > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(stage_vb.pp(j), c_in, width, stride)?);
                c_in = width * EXPANSION;
            }
            layers.push(blocks);
        }
        Ok(Self { stem, layers })
    }
}

impl Backbone for ResNet50 {
    fn forward_features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut x = max_pool_3x3_s2(&self.stem.forward_t(x, train)?.relu()?)?;
        for stage in &self.layers {
            for block in stage {
                x = block.forward_t(&x, train)?;
            }
        }
        Ok(x)
    }
}
