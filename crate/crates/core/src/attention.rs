//! Multi-head self-attention, the post-norm Transformer block and the
//! Conformer block.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{LayerNorm, Linear, ParamBuilder, ParamId, Params};
use crate::posenc::PeKind;
use crate::tensor::{Real, Tensor};

/// Additive mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    Tensor::from_fn(vec![len, len], |idx| {
        let (i, j) = (idx / len, idx % len);
        if j <= i {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MhsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MhsaParams {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(b, "q", d_model, d_model, true),
            k: Linear::new(b, "k", d_model, d_model, true),
            v: Linear::new(b, "v", d_model, d_model, true),
            o: Linear::new(b, "o", d_model, d_model, true),
            heads,
        })
    }
}

/// Attention of every head, with scores scaled by `1/sqrt(d_head)`.
pub fn mhsa<T: Real>(x: &Var<T>, w: &MhsaParams, p: &Params<T>, causal: bool, pe: PeKind) -> Result<Var<T>> {
    let d_model = x.value().cols();
    if w.heads == 0 || !d_model.is_multiple_of(w.heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {} heads",
            w.heads
        )));
    }
    let d_head = d_model / w.heads;
    let len = x.value().rows();
    let mut q = w.q.forward(p, x)?;
    let mut k = w.k.forward(p, x)?;
    let v = w.v.forward(p, x)?;
    if pe == PeKind::Rotary {
        q = q.rope(w.heads)?;
        k = k.rope(w.heads)?;
    }
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let mask = causal.then(|| Var::constant(causal_mask::<T>(len)));
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = q.slice_cols(h * d_head, d_head)?;
        let kh = k.slice_cols(h * d_head, d_head)?;
        let vh = v.slice_cols(h * d_head, d_head)?;
        let mut scores = qh.matmul_t(&kh)?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.add(m)?;
        }
        outs.push(scores.softmax().matmul(&vh)?);
    }
    w.o.forward(p, &Var::concat_cols(&outs)?)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, d_model: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(b, "up", d_model, d_ff, true),
            down: Linear::new(b, "down", d_ff, d_model, true),
        }
    }

    fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>, act: fn(&Var<T>) -> Var<T>) -> Result<Var<T>> {
        self.down.forward(p, &act(&self.up.forward(p, x)?))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub attn: MhsaParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, d_model: usize, d_ff: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: b.scoped("attn", |b| MhsaParams::new(b, d_model, heads))?,
            norm1: LayerNorm::new(b, "norm1", d_model, true),
            ffn: b.scoped("ffn", |b| FeedForward::new(b, d_model, d_ff)),
            norm2: LayerNorm::new(b, "norm2", d_model, true),
        })
    }

    /// `LN(x + MHSA(x))` followed by `LN(y + FFN(y))`.
    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>, causal: bool, pe: PeKind) -> Result<Var<T>> {
        let a = mhsa(x, &self.attn, p, causal, pe)?;
        let y = self.norm1.forward(p, &x.add(&a)?)?;
        let f = self.ffn.forward(p, &y, Var::relu)?;
        self.norm2.forward(p, &y.add(&f)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: ParamId,
    pub pointwise_in_bias: ParamId,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub pointwise_out: Linear,
    pub d_model: usize,
}

impl ConvModule {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, d_model: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(b, "norm", d_model, true),
            pointwise_in: b.fan_in("pointwise_in.weight", &[d_model, 2 * d_model], d_model),
            pointwise_in_bias: b.zeros("pointwise_in.bias", &[2 * d_model]),
            depthwise: b.fan_in("depthwise.weight", &[kernel, d_model], kernel),
            depthwise_bias: b.zeros("depthwise.bias", &[d_model]),
            mid_norm: LayerNorm::new(b, "mid_norm", d_model, true),
            pointwise_out: Linear::new(b, "pointwise_out", d_model, d_model, true),
            d_model,
        }
    }

    fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>, causal: bool) -> Result<Var<T>> {
        let d = self.d_model;
        let y = self.norm.forward(p, x)?;
        let y = y.matmul(p.get(self.pointwise_in))?.add_row(p.get(self.pointwise_in_bias))?;
        let glu = y.slice_cols(0, d)?.mul(&y.slice_cols(d, d)?.sigmoid())?;
        let y = glu.depthwise_conv1d(p.get(self.depthwise), Some(p.get(self.depthwise_bias)), causal)?;
        let y = self.mid_norm.forward(p, &y)?.silu();
        self.pointwise_out.forward(p, &y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConformerBlock {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MhsaParams,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<T>,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conformer kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            ffn1_norm: LayerNorm::new(b, "ffn1_norm", d_model, true),
            ffn1: b.scoped("ffn1", |b| FeedForward::new(b, d_model, d_ff)),
            attn_norm: LayerNorm::new(b, "attn_norm", d_model, true),
            attn: b.scoped("attn", |b| MhsaParams::new(b, d_model, heads))?,
            conv: b.scoped("conv", |b| ConvModule::new(b, d_model, kernel)),
            ffn2_norm: LayerNorm::new(b, "ffn2_norm", d_model, true),
            ffn2: b.scoped("ffn2", |b| FeedForward::new(b, d_model, d_ff)),
            final_norm: LayerNorm::new(b, "final_norm", d_model, true),
        })
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>, causal: bool, pe: PeKind) -> Result<Var<T>> {
        let half = T::from_f64(0.5);
        let f = self.ffn1.forward(p, &self.ffn1_norm.forward(p, x)?, Var::silu)?;
        let x = x.add(&f.scale(half))?;
        let a = mhsa(&self.attn_norm.forward(p, &x)?, &self.attn, p, causal, pe)?;
        let x = x.add(&a)?;
        let x = x.add(&self.conv.forward(p, &x, causal)?)?;
        let f = self.ffn2.forward(p, &self.ffn2_norm.forward(p, &x)?, Var::silu)?;
        let x = x.add(&f.scale(half))?;
        self.final_norm.forward(p, &x)
    }
}
