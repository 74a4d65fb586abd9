//! Three-block CNN used by the test suite; ~7k parameters.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use super::layers::conv;
use super::Backbone;

pub(crate) const FEATURE_DIM: usize = 32;

#[derive(Debug)]
pub(crate) struct TinyTestCnn {
    blocks: [Conv2d; 3],
}

impl TinyTestCnn {
    pub(crate) fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            // 224 -> 56 -> 28 -> 14
            blocks: [
                conv(vb.pp("block1"), 3, 8, 4, 4, 0, 1, true)?,
                conv(vb.pp("block2"), 8, 16, 3, 2, 1, 1, true)?,
                conv(vb.pp("block3"), 16, FEATURE_DIM, 3, 2, 1, 1, true)?,
            ],
        })
    }
}

/// Stride-`k` `k`×`k` convolution without padding, computed as one matmul
/// over non-overlapping patches. Same result as `conv.forward`, but the
/// weight gradient avoids a dilated convolution, which is slow on CPU.
fn patch_conv(conv: &Conv2d, x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return conv.forward(x);
    }
    let (oh, ow) = (h / k, w / k);
    let c_out = conv.weight().dim(0)?;
    let patches = x
        .reshape((b, c, oh, k, ow, k))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b * oh * ow, c * k * k))?;
    let mut y = patches.matmul(&conv.weight().reshape((c_out, c * k * k))?.t()?)?;
    if let Some(bias) = conv.bias() {
        y = y.broadcast_add(bias)?;
    }
    y.reshape((b, oh, ow, c_out))?.permute((0, 3, 1, 2))?.contiguous()
}

impl Backbone for TinyTestCnn {
    fn forward_features(&self, x: &Tensor, _train: bool) -> candle_core::Result<Tensor> {
        let mut x = patch_conv(&self.blocks[0], x, 4)?.relu()?;
        for b in &self.blocks[1..] {
            x = b.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    #[test]
    fn patch_conv_matches_strided_conv() {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
        let c = conv(vb, 3, 8, 4, 4, 0, 1, true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 12), &Device::Cpu).unwrap();
        let diff = (patch_conv(&c, &x, 4).unwrap() - c.forward(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-5, "{diff}");
    }
}
