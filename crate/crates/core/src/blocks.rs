//! Gated residual scan blocks.
//!
//! [`MsSs2d`] splits channels into groups, runs a windowed two-way scan per
//! group at that group's scale, concatenates the groups and merges them
//! with a linear projection and a depthwise convolution. [`ScanBlock`] wraps
//! a mixer in the pre-norm gated residual skeleton:
//!
//! ```text
//! u    = LN(x)
//! main = LN(mixer(silu(dconv(Linear(u)))))
//! gate = silu(Linear(u))
//! out  = x + Linear(main * gate)        (last Linear zero-initialized)
//! ```
//!
//! A plain visual state-space block is the same block with one group at
//! scale 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{DepthwiseConv, Init, LayerNorm, Linear};
use crate::ops::concat;
use crate::params::{ParamBuilder, ParamStore};
use crate::scan_geometry::{cached_window_order, WindowMode};
use crate::selective_scan::{ss2d_var, DirectionReduce, SsmLayer};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsSsmConfig {
    pub scales: Vec<usize>,
    /// Channels per scale; `None` splits equally.
    pub channel_split: Option<Vec<usize>>,
    pub dconv_kernel: usize,
    pub direction_reduce: DirectionReduce,
    pub window_mode: WindowMode,
}

impl Default for MsSsmConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4, 8],
            channel_split: None,
            dconv_kernel: 3,
            direction_reduce: DirectionReduce::Sum,
            window_mode: WindowMode::Divide,
        }
    }
}

impl MsSsmConfig {
    /// One global scale: the plain visual state-space mixer.
    pub fn global() -> Self {
        Self {
            scales: vec![1],
            ..Self::default()
        }
    }

    pub fn resolve_split(&self, channels: usize) -> Result<Vec<usize>> {
        let split = match &self.channel_split {
            Some(s) => s.clone(),
            None => default_split(channels, self.scales.len())?,
        };
        if split.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "{} channel groups for {} scales",
                split.len(),
                self.scales.len()
            )));
        }
        if split.contains(&0) || split.iter().sum::<usize>() != channels {
            return Err(Error::Config(format!("channel split {split:?} does not partition {channels} channels")));
        }
        Ok(split)
    }
}

/// Equal split of `channels` into `n` groups, remainder to the first groups.
pub fn default_split(channels: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || channels < n {
        return Err(Error::Config(format!("cannot split {channels} channels into {n} non-empty groups")));
    }
    let (q, r) = (channels / n, channels % n);
    Ok((0..n).map(|i| q + usize::from(i < r)).collect())
}

/// Contiguous channel slices of a `[C,H,W]` tensor.
pub fn channel_split<T: Scalar>(x: &Tensor<T>, splits: &[usize]) -> Result<Vec<Tensor<T>>> {
    x.expect_rank(3, "channel_split")?;
    if splits.iter().sum::<usize>() != x.dim(0) {
        return Err(Error::Config(format!("split {:?} does not sum to {} channels", splits, x.dim(0))));
    }
    let plane = x.dim(1) * x.dim(2);
    let mut start = 0;
    splits
        .iter()
        .map(|&c| {
            let t = Tensor::new(
                &[c, x.dim(1), x.dim(2)],
                x.data()[start * plane..(start + c) * plane].to_vec(),
            );
            start += c;
            t
        })
        .collect()
}

/// Largest divisor of `s` that tiles an `h x w` grid.
pub fn effective_scale(s: usize, h: usize, w: usize) -> usize {
    (1..=s.max(1))
        .rev()
        .find(|&d| s.is_multiple_of(d) && h.is_multiple_of(d) && w.is_multiple_of(d))
        .unwrap_or(1)
}

/// Multi-scale two-way windowed scan with linear + depthwise merge.
#[derive(Clone, Debug)]
pub struct MsSs2d {
    pub cfg: MsSsmConfig,
    pub split: Vec<usize>,
    pub ssms: Vec<SsmLayer>,
    pub merge: Linear,
    pub dconv: DepthwiseConv,
    /// Clamp each scale to the largest divisor that tiles the input instead
    /// of rejecting it.
    pub adapt_scales: bool,
}

impl MsSs2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, state_dim: usize, cfg: &MsSsmConfig) -> Result<Self> {
        let split = cfg.resolve_split(channels)?;
        let ssms = split
            .iter()
            .enumerate()
            .map(|(i, &c)| SsmLayer::new(&mut pb.sub(&format!("scale{i}")), c, state_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            split,
            ssms,
            merge: Linear::new(&mut pb.sub("merge"), channels, channels, true, Init::FanIn)?,
            dconv: DepthwiseConv::new(&mut pb.sub("dconv"), channels, cfg.dconv_kernel)?,
            adapt_scales: false,
        })
    }

    fn scale_for(&self, i: usize, h: usize, w: usize) -> Result<usize> {
        let s = self.cfg.scales[i];
        if self.adapt_scales {
            return Ok(effective_scale(s, h, w));
        }
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Config(format!("{h}x{w} map is not divisible by scale {s}")));
        }
        Ok(s)
    }

    /// Per-group scans concatenated along channels, before the merge.
    pub fn scan_groups<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.split.iter().sum::<usize>() {
            return Err(shape_err("ms_ss2d", format!("input {s:?} for split {:?}", self.split)));
        }
        let (h, w) = (s[1], s[2]);
        let mut outs = Vec::with_capacity(self.split.len());
        let mut start = 0;
        for (i, (&c, ssm)) in self.split.iter().zip(&self.ssms).enumerate() {
            let xi = if self.split.len() == 1 { x } else { x.slice(0, start, c)? };
            start += c;
            let order = cached_window_order(h, w, self.scale_for(i, h, w)?, self.cfg.window_mode)?;
            let rev = order.reversed();
            outs.push(ss2d_var(cx, ssm, xi, (&order, &rev), self.cfg.direction_reduce)?);
        }
        if outs.len() == 1 {
            Ok(outs.pop().expect("one group"))
        } else {
            concat(&outs, 0)
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let y = self.scan_groups(cx, x)?;
        let y = self.merge.forward(cx, y.chw_to_tokens()?)?.tokens_to_chw(s[1], s[2])?;
        self.dconv.forward(cx, y)
    }
}

/// Evaluates an [`MsSs2d`] on a plain tensor.
pub fn ms_ss2d<T: Scalar>(x: &Tensor<T>, module: &MsSs2d, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let cx = Ctx::new(&g, store);
    Ok(module.forward(&cx, g.constant(x.clone()))?.value().as_ref().clone())
}

#[derive(Clone, Debug)]
pub struct ScanBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv: DepthwiseConv,
    pub mixer: MsSs2d,
    pub out_norm: LayerNorm,
    pub gate_proj: Linear,
    pub out_proj: Linear,
}

impl ScanBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        dim: usize,
        expansion: usize,
        state_dim: usize,
        cfg: &MsSsmConfig,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("block expansion must be positive".into()));
        }
        let inner = dim * expansion;
        Ok(Self {
            norm: LayerNorm::new(&mut pb.sub("norm"), dim)?,
            in_proj: Linear::new(&mut pb.sub("in_proj"), dim, inner, true, Init::FanIn)?,
            conv: DepthwiseConv::new(&mut pb.sub("conv"), inner, 3)?,
            mixer: MsSs2d::new(&mut pb.sub("mixer"), inner, state_dim, cfg)?,
            out_norm: LayerNorm::new(&mut pb.sub("out_norm"), inner)?,
            gate_proj: Linear::new(&mut pb.sub("gate_proj"), dim, inner, true, Init::FanIn)?,
            out_proj: Linear::new(&mut pb.sub("out_proj"), inner, dim, true, Init::Zeros)?,
        })
    }

    /// Plain visual state-space block: one global scale.
    pub fn vssb<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, expansion: usize, state_dim: usize) -> Result<Self> {
        Self::new(pb, dim, expansion, state_dim, &MsSsmConfig::global())
    }

    pub fn with_adaptive_scales(mut self) -> Self {
        self.mixer.adapt_scales = true;
        self
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(shape_err("scan block", format!("expected [C,H,W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let u = self.norm.forward(cx, x.chw_to_tokens()?)?;
        let main = self.in_proj.forward(cx, u)?.tokens_to_chw(h, w)?;
        let main = self.conv.forward(cx, main)?.silu();
        let main = self.mixer.forward(cx, main)?;
        let main = self.out_norm.forward(cx, main.chw_to_tokens()?)?;
        let gate = self.gate_proj.forward(cx, u)?.silu();
        let y = self.out_proj.forward(cx, main.mul(gate)?)?;
        x.add(y.tokens_to_chw(h, w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_rules() {
        assert_eq!(default_split(64, 4).unwrap(), vec![16, 16, 16, 16]);
        assert_eq!(default_split(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert!(default_split(3, 4).is_err());
        let cfg = MsSsmConfig {
            channel_split: Some(vec![1, 2, 2]),
            scales: vec![1, 2, 4],
            ..Default::default()
        };
        assert!(cfg.resolve_split(6).is_err());
    }

    #[test]
    fn channel_split_slices() {
        let x = Tensor::<f64>::from_fn(&[6, 2, 2], |i| i as f64);
        let parts = channel_split(&x, &[1, 2, 3]).unwrap();
        assert_eq!(parts[0].shape(), &[1, 2, 2]);
        assert_eq!(parts[1].data()[0], 4.0);
        assert_eq!(parts[2].data()[0], 12.0);
        let joined: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
        assert_eq!(joined, x.data());
        assert!(matches!(channel_split(&x, &[1, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn effective_scale_clamps() {
        assert_eq!(effective_scale(8, 16, 16), 8);
        assert_eq!(effective_scale(8, 4, 4), 4);
        assert_eq!(effective_scale(8, 2, 2), 2);
        assert_eq!(effective_scale(8, 1, 1), 1);
        assert_eq!(effective_scale(4, 6, 6), 2);
    }

    #[test]
    fn strict_mixer_rejects_indivisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let m = MsSs2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, &MsSsmConfig::default()).unwrap();
        let x = Tensor::zeros(&[8, 4, 4]);
        assert!(matches!(ms_ss2d(&x, &m, &store), Err(Error::Config(_))));
    }
}
