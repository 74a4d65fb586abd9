//! ViT-Base/16 encoder with Hugging Face parameter names (minus the `vit.` prefix).

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Init, Linear, VarBuilder};

use super::layers::{conv, LayerNorm};
use super::Backbone;

const PATCH: usize = 16;
const HIDDEN: usize = 768;
const LAYERS: usize = 12;
const HEADS: usize = 12;
const MLP: usize = 3072;
const EPS: f64 = 1e-12;
const TOKENS: usize = (224 / PATCH) * (224 / PATCH) + 1;
pub(crate) const FEATURE_DIM: usize = HIDDEN;

fn linear(vb: VarBuilder, c_in: usize, c_out: usize) -> candle_core::Result<Linear> {
    let w = vb.get_with_hints((c_out, c_in), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?;
    let b = vb.get_with_hints(c_out, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

#[derive(Debug)]
struct EncoderLayer {
    ln_before: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ln_after: LayerNorm,
    intermediate: Linear,
    output: Linear,
}

impl EncoderLayer {
    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let att = vb.pp("attention");
        Ok(Self {
            ln_before: LayerNorm::new(vb.pp("layernorm_before"), HIDDEN, EPS)?,
            query: linear(att.pp("attention.query"), HIDDEN, HIDDEN)?,
            key: linear(att.pp("attention.key"), HIDDEN, HIDDEN)?,
            value: linear(att.pp("attention.value"), HIDDEN, HIDDEN)?,
            attn_out: linear(att.pp("output.dense"), HIDDEN, HIDDEN)?,
            ln_after: LayerNorm::new(vb.pp("layernorm_after"), HIDDEN, EPS)?,
            intermediate: linear(vb.pp("intermediate.dense"), HIDDEN, MLP)?,
            output: linear(vb.pp("output.dense"), MLP, HIDDEN)?,
        })
    }

    fn heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, t, _) = x.dims3()?;
        x.reshape((n, t, HEADS, HIDDEN / HEADS))?.transpose(1, 2)?.contiguous()
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, t, _) = x.dims3()?;
        let h = self.ln_before.forward(x)?;
        let q = self.heads(&self.query.forward(&h)?)?;
        let k = self.heads(&self.key.forward(&h)?)?;
        let v = self.heads(&self.value.forward(&h)?)?;
        let scale = 1.0 / ((HIDDEN / HEADS) as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let ctx = att.matmul(&v)?.transpose(1, 2)?.reshape((n, t, HIDDEN))?;
        let x = (self.attn_out.forward(&ctx)? + x)?;
        let h = self.ln_after.forward(&x)?;
        let h = self.output.forward(&self.intermediate.forward(&h)?.gelu_erf()?)?;
        h + x
    }
}

#[derive(Debug)]
pub(crate) struct VitBase16 {
    patch: Conv2d,
    cls_token: Tensor,
    position: Tensor,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl VitBase16 {
    pub(crate) fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let emb = vb.pp("embeddings");
        let trunc = Init::Randn { mean: 0.0, stdev: 0.02 };
        let patch = conv(
            emb.pp("patch_embeddings.projection"),
            3,
            HIDDEN,
            PATCH,
            PATCH,
            0,
            1,
            true,
        )?;
        let cls_token = emb.get_with_hints((1, 1, HIDDEN), "cls_token", trunc)?;
        let position = emb.get_with_hints((1, TOKENS, HIDDEN), "position_embeddings", trunc)?;
        let layers = (0..LAYERS)
            .map(|i| EncoderLayer::new(vb.pp("encoder.layer").pp(i)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let norm = LayerNorm::new(vb.pp("layernorm"), HIDDEN, EPS)?;
        Ok(Self {
            patch,
            cls_token,
            position,
            layers,
            norm,
        })
    }
}

impl Backbone for VitBase16 {
    /// Returns the normalized class token, `N×768`.
    fn forward_features(&self, x: &Tensor, _train: bool) -> candle_core::Result<Tensor> {
        let n = x.dim(0)?;
        let patches = self.patch.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((n, 1, HIDDEN))?;
        let mut h = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.position)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.norm.forward(&h)?.narrow(1, 0, 1)?.squeeze(1)
    }
}
