//! Axial-relation guided fusion of the optical and elevation streams.
//!
//! The relation matrix `R = X_o X_eᵀ` scores every optical token against
//! every elevation token. Each axis of `R` is reduced by a learned 1-D
//! circular convolution followed by a mean, passed through a scalar affine
//! map and a softmax over positions. The row path gates the elevation
//! tokens and the column path gates the optical tokens, both rescaled by
//! the token count so a uniform gate is exactly 1.
//!
//! [`FusSsm`] scans the four token sets as one cross-ordered sequence and
//! [`Argfm`] adds embeddings, residual feed-forward updates and a
//! cross-attention head producing the fused map for the decoder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{CrossAttention, Init, LayerNorm, Linear};
use crate::ops::concat;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::selective_scan::{DirectionReduce, SsmLayer};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArgfmConfig {
    pub state_dim: usize,
    pub axial_kernel: usize,
    pub attn_heads: usize,
    pub use_aral: bool,
    /// Largest `H*W` for which the relation matrix may be formed.
    pub max_relation_tokens: usize,
    pub relation_chunk_rows: usize,
    pub direction_reduce: DirectionReduce,
    pub zero_init_fusion_fc: bool,
}

impl Default for ArgfmConfig {
    fn default() -> Self {
        Self {
            state_dim: 8,
            axial_kernel: 3,
            attn_heads: 1,
            use_aral: true,
            max_relation_tokens: 4096,
            relation_chunk_rows: 256,
            direction_reduce: DirectionReduce::Sum,
            zero_init_fusion_fc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix<T: Scalar> {
    /// `[HW,HW]`, `r[i][j] = <x_o[i], x_e[j]>`.
    pub r: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

fn check_tokens<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.dim(0), a.dim(1)))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `X_o X_eᵀ`, filled `chunk_rows` rows at a time.
pub fn relation_matrix<T: Scalar>(
    x_o: &Tensor<T>,
    x_e: &Tensor<T>,
    (h, w): (usize, usize),
    chunk_rows: usize,
) -> Result<RelationMatrix<T>> {
    let (n, c) = check_tokens(x_o, x_e, "relation_matrix")?;
    if n != h * w {
        return Err(shape_err("relation_matrix", format!("{n} tokens for a {h}x{w} grid")));
    }
    let mut r = vec![T::zero(); n * n];
    let rows = chunk_rows.max(1);
    r.par_chunks_mut(rows * n.max(1)).enumerate().for_each(|(ci, block)| {
        for (k, row) in block.chunks_mut(n).enumerate() {
            let i = ci * rows + k;
            let xi = &x_o.data()[i * c..(i + 1) * c];
            for (j, v) in row.iter_mut().enumerate() {
                *v = dot(xi, &x_e.data()[j * c..(j + 1) * c]);
            }
        }
    });
    Ok(RelationMatrix {
        r: Tensor::new(&[n, n], r)?,
        h,
        w,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxialAxis {
    /// Reduce each row (over elevation tokens): one value per optical token.
    Row,
    /// Reduce each column (over optical tokens): one value per elevation token.
    Col,
}

fn check_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("axial kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Circular 1-D convolution of `line` with `kernel`, then the mean.
fn conv_mean<T: Scalar>(line: &[T], kernel: &[T]) -> T {
    let n = line.len();
    let p = kernel.len() / 2;
    let mut acc = T::zero();
    for j in 0..n {
        for (t, &kv) in kernel.iter().enumerate() {
            acc += kv * line[(j + t + n * kernel.len() - p) % n];
        }
    }
    acc / T::from_usize_lossy(n)
}

/// Convolves every row (or column) of `R` along itself and averages it.
pub fn axial_reduce<T: Scalar>(r: &Tensor<T>, axis: AxialAxis, kernel: &[T]) -> Result<Tensor<T>> {
    check_kernel(kernel.len())?;
    if r.rank() != 2 || r.dim(0) != r.dim(1) {
        return Err(shape_err("axial_reduce", format!("expected square matrix, got {:?}", r.shape())));
    }
    let n = r.dim(0);
    let m = match axis {
        AxialAxis::Row => r.clone(),
        AxialAxis::Col => r.t()?,
    };
    let out = (0..n).map(|i| conv_mean(&m.data()[i * n..(i + 1) * n], kernel)).collect();
    Tensor::new(&[n], out)
}

/// Softmax-normalized axial vectors; `v_e` comes from the row path and
/// `v_o` from the column path.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialWeights<T: Scalar> {
    /// `[HW,1]`
    pub v_e: Tensor<T>,
    /// `[1,HW]`
    pub v_o: Tensor<T>,
}

/// Reduced axis through the scalar affine map `fc = (scale, bias)` and a
/// softmax over positions.
pub fn axial_vector<T: Scalar>(r: &Tensor<T>, axis: AxialAxis, kernel: &[T], fc: (T, T)) -> Result<Tensor<T>> {
    let red = axial_reduce(r, axis, kernel)?;
    let logits = red.map(|v| fc.0 * v + fc.1);
    crate::numerics::softmax(&logits, 0)
}

pub fn axial_weights<T: Scalar>(r: &Tensor<T>, kernel_row: &[T], kernel_col: &[T], fc_row: (T, T), fc_col: (T, T)) -> Result<AxialWeights<T>> {
    let n = r.dim(0);
    Ok(AxialWeights {
        v_e: axial_vector(r, AxialAxis::Row, kernel_row, fc_row)?.reshape(&[n, 1])?,
        v_o: axial_vector(r, AxialAxis::Col, kernel_col, fc_col)?.reshape(&[1, n])?,
    })
}

/// Row-wise axial reduction of `Q Kᵀ` without storing more than
/// `chunk_rows` rows of it. `q`, `k`: `[N,C]`; `kernel`: `[k]`; output `[N,1]`.
fn relation_reduce_var<'g, T: Scalar>(q: Var<'g, T>, k: Var<'g, T>, kernel: Var<'g, T>, chunk_rows: usize) -> Result<Var<'g, T>> {
    let (qv, kv, wv) = (q.value(), k.value(), kernel.value());
    let (n, c) = check_tokens(&qv, &kv, "axial relation")?;
    check_kernel(wv.len())?;
    let rows = chunk_rows.max(1);
    let (qd, kd, wd) = (qv.data(), kv.data(), wv.data());
    let mut out = vec![T::zero(); n];
    out.par_chunks_mut(rows).enumerate().for_each(|(ci, block)| {
        let mut line = vec![T::zero(); n];
        for (r, o) in block.iter_mut().enumerate() {
            let i = ci * rows + r;
            let qi = &qd[i * c..(i + 1) * c];
            for (j, v) in line.iter_mut().enumerate() {
                *v = dot(qi, &kd[j * c..(j + 1) * c]);
            }
            *o = conv_mean(&line, wd);
        }
    });
    // Circular padding makes every entry of a row contribute with weight
    // sum(kernel) / N, which gives a closed-form backward.
    Ok(q.graph().op(
        Tensor::new(&[n, 1], out)?,
        &[q, k, kernel],
        Box::new(move |g, inp, _| {
            let (q, k, w) = (&inp[0], &inp[1], &inp[2]);
            let inv_n = T::one() / T::from_usize_lossy(n);
            let wsum = w.sum();
            let mut ksum = vec![T::zero(); c];
            let mut gq_sum = vec![T::zero(); c];
            for j in 0..n {
                for ch in 0..c {
                    ksum[ch] += k.data()[j * c + ch];
                    gq_sum[ch] += g.data()[j] * q.data()[j * c + ch];
                }
            }
            let mut gq = vec![T::zero(); n * c];
            let mut gw_total = T::zero();
            for i in 0..n {
                let gi = g.data()[i];
                for ch in 0..c {
                    gq[i * c + ch] = gi * wsum * inv_n * ksum[ch];
                }
                gw_total += gi * dot(&q.data()[i * c..(i + 1) * c], &ksum) * inv_n;
            }
            let gk: Vec<T> = (0..n * c).map(|idx| wsum * inv_n * gq_sum[idx % c]).collect();
            vec![
                Tensor::new(&[n, c], gq).expect("relation grad"),
                Tensor::new(&[n, c], gk).expect("relation grad"),
                Tensor::full(w.shape(), gw_total),
            ]
        }),
    ))
}

/// Learned reduction along one axis of the relation matrix.
#[derive(Clone, Debug)]
pub struct AxialPath {
    pub kernel: ParamId,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl AxialPath {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, kernel: usize) -> Result<Self> {
        check_kernel(kernel)?;
        Ok(Self {
            kernel: pb.tensor("kernel", Tensor::full(&[kernel], T::one() / T::from_usize_lossy(kernel)))?,
            fc_weight: pb.ones("fc_weight", &[1, 1])?,
            fc_bias: pb.zeros("fc_bias", &[1, 1])?,
        })
    }

    /// Softmax weights `[N,1]` summing to one.
    fn weights<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, q: Var<'g, T>, k: Var<'g, T>, chunk_rows: usize) -> Result<Var<'g, T>> {
        let red = relation_reduce_var(q, k, cx.p(self.kernel), chunk_rows)?;
        red.mul(cx.p(self.fc_weight))?.add(cx.p(self.fc_bias))?.softmax(0)
    }
}

/// Axial relation attention layer.
#[derive(Clone, Debug)]
pub struct Aral {
    pub row: AxialPath,
    pub col: AxialPath,
    pub chunk_rows: usize,
}

impl Aral {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, kernel: usize, chunk_rows: usize) -> Result<Self> {
        Ok(Self {
            row: AxialPath::new(&mut pb.sub("row"), kernel)?,
            col: AxialPath::new(&mut pb.sub("col"), kernel)?,
            chunk_rows,
        })
    }

    /// `(V_e [N,1], V_o [N,1])` for tokens `x_o`, `x_e` (`[N,C]`).
    pub fn axial_weights<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x_o: Var<'g, T>, x_e: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let v_e = self.row.weights(cx, x_o, x_e, self.chunk_rows)?;
        let v_o = self.col.weights(cx, x_e, x_o, self.chunk_rows)?;
        Ok((v_e, v_o))
    }

    /// Gated tokens `(X'_o, X'_e)`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x_o: Var<'g, T>, x_e: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let n = T::from_usize_lossy(x_o.shape()[0]);
        let (v_e, v_o) = self.axial_weights(cx, x_o, x_e)?;
        Ok((x_o.mul(v_o.scale(n))?, x_e.mul(v_e.scale(n))?))
    }
}

/// Four-stream fusion scan over `[X̃_o, X'_e, X̃_e, X'_o]`.
#[derive(Clone, Debug)]
pub struct FusSsm {
    pub ssm: SsmLayer,
    pub reduce: DirectionReduce,
}

impl FusSsm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, state_dim: usize, reduce: DirectionReduce) -> Result<Self> {
        Ok(Self {
            ssm: SsmLayer::new(&mut pb.sub("ssm"), channels, state_dim)?,
            reduce,
        })
    }

    /// Joint `[4N,C]` sequence scanned both ways, before splitting.
    pub fn scan_joint<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, joint: Var<'g, T>) -> Result<Var<'g, T>> {
        let l = joint.shape()[0];
        let rev: Vec<usize> = (0..l).rev().collect();
        let fwd = self.ssm.forward(cx, joint, l)?;
        let bwd = self.ssm.forward(cx, joint.rows(&rev)?, l)?.rows(&rev)?;
        let sum = fwd.add(bwd)?;
        Ok(match self.reduce {
            DirectionReduce::Sum => sum,
            DirectionReduce::Mean => sum.scale(T::lit(0.5)),
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        xt_o: Var<'g, T>,
        xt_e: Var<'g, T>,
        xp_o: Var<'g, T>,
        xp_e: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = xt_o.shape();
        if s.len() != 2 || [xt_e.shape(), xp_o.shape(), xp_e.shape()].iter().any(|o| *o != s) {
            return Err(shape_err("fus_ssm", "all four token sets must share one [N,C] shape"));
        }
        let n = s[0];
        let y = self.scan_joint(cx, concat(&[xt_o, xp_e, xt_e, xp_o], 0)?)?;
        let seg = |i: usize| y.slice(0, i * n, n);
        Ok((seg(0)?.add(seg(3)?)?, seg(2)?.add(seg(1)?)?))
    }
}

/// Pointwise linear + layer norm + residual feed-forward update for one
/// modality.
#[derive(Clone, Debug)]
pub struct StreamUpdate {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl StreamUpdate {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut pb.sub("proj"), c, c, true, Init::FanIn)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), c)?,
            ffn_in: Linear::new(&mut pb.sub("ffn_in"), c, 2 * c, true, Init::FanIn)?,
            ffn_out: Linear::new(&mut pb.sub("ffn_out"), 2 * c, c, true, Init::Zeros)?,
        })
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let u = self.norm.forward(cx, self.proj.forward(cx, z)?)?;
        self.ffn_out.forward(cx, self.ffn_in.forward(cx, u)?.silu())
    }
}

#[derive(Clone, Debug)]
pub struct Embed {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Embed {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut pb.sub("proj"), c, c, true, Init::FanIn)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), c)?,
        })
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.norm.forward(cx, self.proj.forward(cx, x)?)
    }
}

/// Outputs of one fusion module.
pub struct FusionOutput<'g, T: Scalar> {
    pub f_o: Var<'g, T>,
    pub f_e: Var<'g, T>,
    pub fused: Var<'g, T>,
}

/// Axial-relation guided fusion module.
#[derive(Clone, Debug)]
pub struct Argfm {
    pub cfg: ArgfmConfig,
    pub channels: usize,
    pub embed_o: Embed,
    pub embed_e: Embed,
    pub aral: Aral,
    pub fus: FusSsm,
    pub update_o: StreamUpdate,
    pub update_e: StreamUpdate,
    pub attn: CrossAttention,
    pub fc: Linear,
}

impl Argfm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, cfg: &ArgfmConfig) -> Result<Self> {
        let fc_init = if cfg.zero_init_fusion_fc { Init::Zeros } else { Init::FanIn };
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            embed_o: Embed::new(&mut pb.sub("embed_o"), channels)?,
            embed_e: Embed::new(&mut pb.sub("embed_e"), channels)?,
            aral: Aral::new(&mut pb.sub("aral"), cfg.axial_kernel, cfg.relation_chunk_rows)?,
            fus: FusSsm::new(&mut pb.sub("fus"), channels, cfg.state_dim, cfg.direction_reduce)?,
            update_o: StreamUpdate::new(&mut pb.sub("update_o"), channels)?,
            update_e: StreamUpdate::new(&mut pb.sub("update_e"), channels)?,
            attn: CrossAttention::new(&mut pb.sub("attn"), channels, cfg.attn_heads)?,
            fc: Linear::new(&mut pb.sub("fc"), channels, channels, true, fc_init)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, f_o: Var<'g, T>, f_e: Var<'g, T>) -> Result<FusionOutput<'g, T>> {
        let s = f_o.shape();
        if s.len() != 3 || f_e.shape() != s || s[0] != self.channels {
            return Err(shape_err("argfm", format!("{:?} vs {:?} for {} channels", s, f_e.shape(), self.channels)));
        }
        let (h, w) = (s[1], s[2]);
        if h * w > self.cfg.max_relation_tokens {
            return Err(Error::Resource(format!(
                "fusion at {h}x{w} needs {} tokens, above the relation limit of {} (H*W)",
                h * w,
                self.cfg.max_relation_tokens
            )));
        }
        let x_o = f_o.chw_to_tokens()?;
        let x_e = f_e.chw_to_tokens()?;
        let xt_o = self.embed_o.forward(cx, x_o)?;
        let xt_e = self.embed_e.forward(cx, x_e)?;
        let (xp_o, xp_e) = if self.cfg.use_aral {
            self.aral.forward(cx, x_o, x_e)?
        } else {
            (xt_o, xt_e)
        };
        let (z_o, z_e) = self.fus.forward(cx, xt_o, xt_e, xp_o, xp_e)?;
        let f_o2 = f_o.add(self.update_o.forward(cx, z_o)?.tokens_to_chw(h, w)?)?;
        let f_e2 = f_e.add(self.update_e.forward(cx, z_e)?.tokens_to_chw(h, w)?)?;
        // attention layer with a residual on its queries
        let q = f_o2.chw_to_tokens()?;
        let att = q.add(self.attn.forward(cx, q, f_e2.chw_to_tokens()?)?)?;
        let fused = self.fc.forward(cx, att)?.tokens_to_chw(h, w)?;
        Ok(FusionOutput {
            f_o: f_o2,
            f_e: f_e2,
            fused,
        })
    }
}

fn take<T: Scalar>(v: Var<'_, T>) -> Tensor<T> {
    v.value().as_ref().clone()
}

/// Evaluates [`Aral`] on `[C,H,W]` maps, returning token tensors `(X'_o, X'_e)`.
pub fn aral<T: Scalar>(f_o: &Tensor<T>, f_e: &Tensor<T>, module: &Aral, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if f_o.shape() != f_e.shape() {
        return Err(shape_err("aral", format!("{:?} vs {:?}", f_o.shape(), f_e.shape())));
    }
    let g = Graph::inference();
    let cx = Ctx::new(&g, store);
    let (a, b) = module.forward(&cx, g.constant(f_o.chw_to_tokens()?), g.constant(f_e.chw_to_tokens()?))?;
    Ok((take(a), take(b)))
}

/// Evaluates [`FusSsm`] on token tensors, returning `(Z_o, Z_e)`.
pub fn fus_ssm<T: Scalar>(
    xt_o: &Tensor<T>,
    xt_e: &Tensor<T>,
    xp_o: &Tensor<T>,
    xp_e: &Tensor<T>,
    module: &FusSsm,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::inference();
    let cx = Ctx::new(&g, store);
    let c = |t: &Tensor<T>| g.constant(t.clone());
    let (a, b) = module.forward(&cx, c(xt_o), c(xt_e), c(xp_o), c(xp_e))?;
    Ok((take(a), take(b)))
}

/// Evaluates [`Argfm`], returning `(F'_o, F'_e, F_f)`.
pub fn argfm<T: Scalar>(f_o: &Tensor<T>, f_e: &Tensor<T>, module: &Argfm, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Graph::inference();
    let cx = Ctx::new(&g, store);
    let out = module.forward(&cx, g.constant(f_o.clone()), g.constant(f_e.clone()))?;
    Ok((take(out.f_o), take(out.f_e), take(out.fused)))
}
