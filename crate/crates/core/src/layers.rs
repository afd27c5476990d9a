//! Parameterized building blocks shared by the encoder, fusion and decoder.

use crate::autodiff::{Ctx, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// How a weight tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = match init {
            Init::FanIn => pb.uniform("weight", &[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt())?,
            Init::Zeros => pb.zeros("weight", &[in_dim, out_dim])?,
        };
        let bias = if bias { Some(pb.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(cx.p(self.weight), self.bias.map(|b| cx.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones("gamma", &[dim])?,
            beta: pb.zeros("beta", &[dim])?,
        })
    }

    /// Normalizes the last axis (tokens `[L,C]`).
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(cx.p(self.gamma), cx.p(self.beta), LN_EPS)
    }

    /// Normalizes the channel axis of a `[C,H,W]` map.
    pub fn forward_chw<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let t = self.forward(cx, x.chw_to_tokens()?)?;
        t.tokens_to_chw(s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub size: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, size: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {size}")));
        }
        Ok(Self {
            kernel: pb.uniform("kernel", &[channels, size, size], 1.0 / size as f64)?,
            bias: pb.zeros("bias", &[channels, 1, 1])?,
            channels,
            size,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.depthwise_conv2d(cx.p(self.kernel))?.add(cx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[cout, cin, kernel, kernel], bound)?,
            bias: pb.zeros("bias", &[cout])?,
            stride,
            pad,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.pad)
    }
}

/// Scaled dot-product attention with queries from one token set and
/// keys/values from another. No output projection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible into {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(&mut pb.sub("q"), dim, dim, false, Init::FanIn)?,
            wk: Linear::new(&mut pb.sub("k"), dim, dim, false, Init::FanIn)?,
            wv: Linear::new(&mut pb.sub("v"), dim, dim, false, Init::FanIn)?,
            heads,
        })
    }

    /// `query_tokens`, `kv_tokens`: `[L,C]` -> `[L_q,C]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, query_tokens: Var<'g, T>, kv_tokens: Var<'g, T>) -> Result<Var<'g, T>> {
        let q = self.wq.forward(cx, query_tokens)?;
        let k = self.wk.forward(cx, kv_tokens)?;
        let v = self.wv.forward(cx, kv_tokens)?;
        attend(q, k, v, self.heads)
    }
}

/// Multi-head attention over already-projected `q`, `k`, `v` (`[L,C]`).
pub fn attend<'g, T: Scalar>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let c = q.shape()[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
    }
    let d = c / heads;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice(1, h * d, d)?, k.slice(1, h * d, d)?, v.slice(1, h * d, d)?)
        };
        let logits = qh.matmul(kh.permute(&[1, 0])?)?.scale(scale);
        outs.push(logits.softmax(1)?.matmul(vh)?);
    }
    if heads == 1 {
        Ok(outs.pop().expect("one head"))
    } else {
        crate::ops::concat(&outs, 1)
    }
}
