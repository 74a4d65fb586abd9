//! EfficientNet-B3 with torchvision parameter names.
//!
//! Stochastic depth is not applied; residual branches are always kept.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};

use super::layers::{bn, conv, ConvBn};
use super::Backbone;

const WIDTH_MULT: f64 = 1.2;
const DEPTH_MULT: f64 = 1.4;
pub(crate) const FEATURE_DIM: usize = 1536;

/// (expand ratio, kernel, stride, in channels, out channels, layers) before scaling.
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

fn make_divisible(v: f64) -> usize {
    let divisor = 8usize;
    let mut new_v = divisor.max(((v + divisor as f64 / 2.0) as usize) / divisor * divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

fn scaled_channels(c: usize) -> usize {
    make_divisible(c as f64 * WIDTH_MULT)
}

fn scaled_layers(n: usize) -> usize {
    (n as f64 * DEPTH_MULT).ceil() as usize
}

#[derive(Debug)]
struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let s = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let s = self.fc1.forward(&s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.fc2.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

#[derive(Debug)]
struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(
        vb: VarBuilder,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
    ) -> candle_core::Result<Self> {
        let vb = vb.pp("block");
        let expanded = c_in * expand_ratio;
        let mut idx = 0;
        let expand = if expanded != c_in {
            let e = ConvBn::new(
                conv(vb.pp("0.0"), c_in, expanded, 1, 1, 0, 1, false)?,
                bn(vb.pp("0.1"), expanded)?,
            );
            idx += 1;
            Some(e)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            conv(
                vb.pp(format!("{idx}.0")),
                expanded,
                expanded,
                kernel,
                stride,
                (kernel - 1) / 2,
                expanded,
                false,
            )?,
            bn(vb.pp(format!("{idx}.1")), expanded)?,
        );
        let squeeze = (c_in / 4).max(1);
        let se_vb = vb.pp(idx + 1);
        let se = SqueezeExcite {
            fc1: conv(se_vb.pp("fc1"), expanded, squeeze, 1, 1, 0, 1, true)?,
            fc2: conv(se_vb.pp("fc2"), squeeze, expanded, 1, 1, 0, 1, true)?,
        };
        let project = ConvBn::new(
            conv(vb.pp(format!("{}.0", idx + 2)), expanded, c_out, 1, 1, 0, 1, false)?,
            bn(vb.pp(format!("{}.1", idx + 2)), c_out)?,
        );
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut y = match &self.expand {
            Some(e) => e.forward_t(x, train)?.silu()?,
            None => x.clone(),
        };
        y = self.depthwise.forward_t(&y, train)?.silu()?;
        y = self.se.forward(&y)?;
        y = self.project.forward_t(&y, train)?;
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

#[derive(Debug)]
pub(crate) struct EfficientNetB3 {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    top: ConvBn,
}

impl EfficientNetB3 {
    pub(crate) fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let vb = vb.pp("features");
        let stem_out = scaled_channels(32);
        let stem = ConvBn::new(
            conv(vb.pp("0.0"), 3, stem_out, 3, 2, 1, 1, false)?,
            bn(vb.pp("0.1"), stem_out)?,
        );
        let mut blocks = Vec::new();
        let mut last = stem_out;
        for (i, &(expand, kernel, stride, c_in, c_out, n)) in STAGES.iter().enumerate() {
            let (c_in, c_out) = (scaled_channels(c_in), scaled_channels(c_out));
            for j in 0..scaled_layers(n) {
                let (cin, s) = if j == 0 { (c_in, stride) } else { (c_out, 1) };
                blocks.push(MbConv::new(vb.pp(i + 1).pp(j), expand, kernel, s, cin, c_out)?);
            }
            last = c_out;
        }
        let top_vb = vb.pp(STAGES.len() + 1);
        let top = ConvBn::new(
            conv(top_vb.pp("0"), last, FEATURE_DIM, 1, 1, 0, 1, false)?,
            bn(top_vb.pp("1"), FEATURE_DIM)?,
        );
        Ok(Self { stem, blocks, top })
    }
}

impl Backbone for EfficientNetB3 {
    fn forward_features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut x = self.stem.forward_t(x, train)?.silu()?;
        for b in &self.blocks {
            x = b.forward_t(&x, train)?;
        }
        self.top.forward_t(&x, train)?.silu()
    }
}
