//! Feed-forward Transformer blocks: masked multi-head self-attention and a
//! convolutional feed-forward sublayer, each with residual + layer norm.

use candle_core::Tensor;

use super::layers::{softmax_last, Conv1d, ForwardCtx, LayerNorm, Linear, SeqMask};
use super::params::Scope;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct FftBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_norm: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    ffn_norm: LayerNorm,
    n_heads: usize,
    dropout: f64,
}

impl FftBlock {
    pub fn new(s: &mut Scope, dim: usize, n_heads: usize, ffn_dim: usize, kernel: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&mut s.sub("attn.q"), dim, dim)?,
            k: Linear::new(&mut s.sub("attn.k"), dim, dim)?,
            v: Linear::new(&mut s.sub("attn.v"), dim, dim)?,
            out: Linear::new(&mut s.sub("attn.out"), dim, dim)?,
            attn_norm: LayerNorm::new(&mut s.sub("attn_norm"), dim)?,
            conv1: Conv1d::new(&mut s.sub("ffn.conv1"), dim, ffn_dim, kernel)?,
            conv2: Conv1d::new(&mut s.sub("ffn.conv2"), ffn_dim, dim, 1)?,
            ffn_norm: LayerNorm::new(&mut s.sub("ffn_norm"), dim)?,
            n_heads,
            dropout,
        })
    }

    /// `x` is `B x T x d`; returns the output and the `B x H x T x T` attention weights.
    pub fn forward_with_attention(&self, x: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.n_heads;
        let x = mask.apply(x)?;
        let heads = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.n_heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = heads(self.q.forward(&x)?)?;
        let k = heads(self.k.forward(&x)?)?;
        let v = heads(self.v.forward(&x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?.broadcast_add(&mask.key_bias)?;
        let attn = softmax_last(&scores)?;
        let ctx_vec = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        let attended = ctx.dropout(&self.out.forward(&ctx_vec)?, self.dropout)?;
        let h = mask.apply(&self.attn_norm.forward(&(x + attended)?)?)?;

        let inner = mask.apply(&self.conv1.forward(&h)?.relu()?)?;
        let ffn = self.conv2.forward(&inner)?;
        let ffn = ctx.dropout(&ffn, self.dropout)?;
        let out = mask.apply(&self.ffn_norm.forward(&(h + ffn)?)?)?;
        Ok((out, attn))
    }

    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, mask, ctx)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FftStack {
    blocks: Vec<FftBlock>,
}

impl FftStack {
    pub fn new(
        s: &mut Scope,
        n_blocks: usize,
        dim: usize,
        n_heads: usize,
        ffn_dim: usize,
        kernel: usize,
        dropout: f64,
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| FftBlock::new(&mut s.sub(&format!("block{i}")), dim, n_heads, ffn_dim, kernel, dropout))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, mask, ctx)?;
        }
        Ok(h)
    }

    pub fn blocks(&self) -> &[FftBlock] {
        &self.blocks
    }
}
