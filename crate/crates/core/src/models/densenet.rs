//! DenseNet-121 with torchvision parameter names.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{BatchNorm, Conv2d, VarBuilder};

use super::layers::{bn, conv, max_pool_3x3_s2};
use super::Backbone;

const GROWTH: usize = 32;
const BN_SIZE: usize = 4;
const BLOCKS: [usize; 4] = [6, 12, 24, 16];
const INIT_FEATURES: usize = 64;
pub(crate) const FEATURE_DIM: usize = 1024;

#[derive(Debug)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(vb: VarBuilder, c_in: usize) -> candle_core::Result<Self> {
        let mid = BN_SIZE * GROWTH;
        Ok(Self {
            norm1: bn(vb.pp("norm1"), c_in)?,
            conv1: conv(vb.pp("conv1"), c_in, mid, 1, 1, 0, 1, false)?,
            norm2: bn(vb.pp("norm2"), mid)?,
            conv2: conv(vb.pp("conv2"), mid, GROWTH, 3, 1, 1, 1, false)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = self.conv1.forward(&self.norm1.forward_t(x, train)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward_t(&y, train)?.relu()?)
    }
}

#[derive(Debug)]
struct Transition {
    norm: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug)]
pub(crate) struct DenseNet121 {
    conv0: Conv2d,
    norm0: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
}

impl DenseNet121 {
    pub(crate) fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let vb = vb.pp("features");
        let conv0 = conv(vb.pp("conv0"), 3, INIT_FEATURES, 7, 2, 3, 1, false)?;
        let norm0 = bn(vb.pp("norm0"), INIT_FEATURES)?;
        let mut channels = INIT_FEATURES;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in BLOCKS.iter().enumerate() {
            let block_vb = vb.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::with_capacity(n);
            for j in 0..n {
                layers.push(DenseLayer::new(block_vb.pp(format!("denselayer{}", j + 1)), channels)?);
                channels += GROWTH;
            }
            blocks.push(layers);
            if i + 1 < BLOCKS.len() {
                let t_vb = vb.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: bn(t_vb.pp("norm"), channels)?,
                    conv: conv(t_vb.pp("conv"), channels, channels / 2, 1, 1, 0, 1, false)?,
                });
                channels /= 2;
            }
        }
        debug_assert_eq!(channels, FEATURE_DIM);
        let norm5 = bn(vb.pp("norm5"), channels)?;
        Ok(Self {
            conv0,
            norm0,
            blocks,
            transitions,
            norm5,
        })
    }
}

impl Backbone for DenseNet121 {
    fn forward_features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let x = self.norm0.forward_t(&self.conv0.forward(x)?, train)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut features = vec![x];
            for layer in block {
                let input = Tensor::cat(&features, 1)?;
                features.push(layer.forward_t(&input, train)?);
            }
            x = Tensor::cat(&features, 1)?;
            if let Some(t) = self.transitions.get(i) {
                let y = t.conv.forward(&t.norm.forward_t(&x, train)?.relu()?)?;
                x = y.avg_pool2d(2)?;
            }
        }
        self.norm5.forward_t(&x, train)?.relu()
    }
}
