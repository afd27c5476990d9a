//! The dual-stream encoder/decoder.
//!
//! Each stream has a 4x strided stem and a stack of stages. A stage runs a
//! plain scan block followed by a multi-scale scan block on each stream and
//! then fuses the pair; the fused map is kept as a decoder skip and the
//! updated streams are downsampled 2x (channels doubled) for the next stage.
//! The decoder walks back up from the deepest fused map, with auxiliary
//! heads on the deeper decoder blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph, Var};
use crate::blocks::{MsSsmConfig, ScanBlock};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{Argfm, ArgfmConfig};
use crate::layers::{Conv2d, DepthwiseConv, Init, LayerNorm, Linear};
use crate::ops::concat;
use crate::params::{ParamBuilder, ParamStore};
use crate::scan_geometry::WindowMode;
use crate::selective_scan::DirectionReduce;
use crate::tensor::{Scalar, Tensor};

pub const STEM_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    /// One entry per stage; stage `i` has `base_channels * 2^i` channels.
    pub blocks_per_stage: Vec<usize>,
    pub scales: Vec<usize>,
    pub state_dim: usize,
    pub aux_head_count: usize,
    pub aux_loss_weight: f64,
    pub use_ms_ssm: bool,
    pub use_argfm: bool,
    pub use_aral: bool,
    pub window_mode: WindowMode,
    pub expansion: usize,
    pub dconv_kernel: usize,
    pub axial_kernel: usize,
    pub attn_heads: usize,
    pub direction_reduce: DirectionReduce,
    pub max_relation_tokens: usize,
    pub relation_chunk_rows: usize,
    pub zero_init_fusion_fc: bool,
    pub optical_channels: usize,
    pub dsm_channels: usize,
    /// Width of every decoder block; `None` uses the matching stage width.
    pub decoder_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            base_channels: 32,
            blocks_per_stage: vec![1, 1, 1, 1],
            scales: vec![1, 2, 4, 8],
            state_dim: 8,
            aux_head_count: 2,
            aux_loss_weight: 0.4,
            use_ms_ssm: true,
            use_argfm: true,
            use_aral: true,
            window_mode: WindowMode::Divide,
            expansion: 2,
            dconv_kernel: 3,
            axial_kernel: 3,
            attn_heads: 1,
            direction_reduce: DirectionReduce::Sum,
            max_relation_tokens: 4096,
            relation_chunk_rows: 256,
            zero_init_fusion_fc: false,
            optical_channels: 3,
            dsm_channels: 1,
            decoder_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.blocks_per_stage.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|i| self.base_channels << i).collect()
    }

    /// Output width of the decoder block at stage `k`'s resolution.
    pub fn decoder_width(&self, k: usize) -> usize {
        self.decoder_channels.unwrap_or(self.base_channels << k)
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        STEM_STRIDE << self.num_stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.base_channels == 0 || self.state_dim == 0 || self.expansion == 0 {
            return bad("base_channels, state_dim and expansion must be positive".into());
        }
        if self.num_stages() < 2 {
            return bad("at least two stages are required".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.aux_head_count > self.num_stages() - 2 {
            return bad(format!(
                "{} auxiliary heads requested, at most {} decoder blocks can carry one",
                self.aux_head_count,
                self.num_stages() - 2
            ));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad("scales must be non-empty and positive".into());
        }
        let inner = self.base_channels * self.expansion;
        if self.use_ms_ssm && inner < self.scales.len() {
            return bad(format!("{inner} inner channels cannot be split over {} scales", self.scales.len()));
        }
        if !self.base_channels.is_multiple_of(self.attn_heads.max(1)) || self.attn_heads == 0 {
            return bad(format!("{} channels not divisible into {} heads", self.base_channels, self.attn_heads));
        }
        for (name, k) in [("dconv_kernel", self.dconv_kernel), ("axial_kernel", self.axial_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if !self.aux_loss_weight.is_finite() || self.aux_loss_weight < 0.0 {
            return bad("aux_loss_weight must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn ms_ssm(&self) -> MsSsmConfig {
        MsSsmConfig {
            scales: self.scales.clone(),
            channel_split: None,
            dconv_kernel: self.dconv_kernel,
            direction_reduce: self.direction_reduce,
            window_mode: self.window_mode,
        }
    }

    pub fn argfm(&self) -> ArgfmConfig {
        ArgfmConfig {
            state_dim: self.state_dim,
            axial_kernel: self.axial_kernel,
            attn_heads: self.attn_heads,
            use_aral: self.use_aral,
            max_relation_tokens: self.max_relation_tokens,
            relation_chunk_rows: self.relation_chunk_rows,
            direction_reduce: self.direction_reduce,
            zero_init_fusion_fc: self.zero_init_fusion_fc,
        }
    }
}

/// Strided convolutional stem plus channel norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.sub("conv"), cin, c, STEM_STRIDE, STEM_STRIDE, 0)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), c)?,
        })
    }

    /// `[c_in,H,W]` -> `[C,H/4,W/4]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 3 || !s[1].is_multiple_of(STEM_STRIDE) || !s[2].is_multiple_of(STEM_STRIDE) {
            return Err(shape_err("patch_embed", format!("input {s:?} is not divisible by {STEM_STRIDE}")));
        }
        self.norm.forward_chw(cx, self.conv.forward(cx, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Downsample {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.sub("conv"), c, 2 * c, 2, 2, 0)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), 2 * c)?,
        })
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.norm.forward_chw(cx, self.conv.forward(cx, x)?)
    }
}

/// One scan block pair per configured block in a stage.
#[derive(Clone, Debug)]
pub struct StreamStage {
    pub blocks: Vec<(ScanBlock, ScanBlock)>,
}

impl StreamStage {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, c: usize, n: usize) -> Result<Self> {
        let blocks = (0..n)
            .map(|b| {
                let mut pb = pb.sub(&format!("block{b}"));
                let vssb = ScanBlock::vssb(&mut pb.sub("vssb"), c, cfg.expansion, cfg.state_dim)?;
                let second = if cfg.use_ms_ssm {
                    ScanBlock::new(&mut pb.sub("ms_ssm"), c, cfg.expansion, cfg.state_dim, &cfg.ms_ssm())?.with_adaptive_scales()
                } else {
                    ScanBlock::vssb(&mut pb.sub("vssb2"), c, cfg.expansion, cfg.state_dim)?
                };
                Ok((vssb, second))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        for (a, b) in &self.blocks {
            x = b.forward(cx, a.forward(cx, x)?)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum StageFusion {
    Argfm(Box<Argfm>),
    /// Channel concat followed by a pointwise projection; streams pass
    /// through unchanged.
    Concat(Linear),
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub reduce: Linear,
    pub conv: DepthwiseConv,
    pub norm: LayerNorm,
}

impl DecoderBlock {
    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, deep: Var<'g, T>, skip: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = skip.shape();
        let x = concat(&[deep.upsample_nearest(2)?, skip], 0)?;
        let x = self.reduce.forward(cx, x.chw_to_tokens()?)?.tokens_to_chw(s[1], s[2])?;
        Ok(self.norm.forward_chw(cx, self.conv.forward(cx, x)?)?.silu())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub proj: Linear,
    pub upsample: usize,
}

impl Head {
    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let y = self.proj.forward(cx, x.chw_to_tokens()?)?.tokens_to_chw(s[1], s[2])?;
        if self.upsample == 1 {
            Ok(y)
        } else {
            y.upsample_bilinear(self.upsample)
        }
    }
}

pub struct ForwardOutput<'g, T: Scalar> {
    /// `[K,H,W]` at input resolution.
    pub logits: Var<'g, T>,
    /// Deepest first, each at input resolution.
    pub aux_logits: Vec<Var<'g, T>>,
    /// Fused map of every stage, shallowest first.
    pub fused_skips: Vec<Var<'g, T>>,
}

pub struct LossOutput<'g, T: Scalar> {
    pub loss: Var<'g, T>,
    /// Pixels that contributed to each cross-entropy term.
    pub valid_pixels: usize,
    /// Set when every label was the ignore index; the loss is then zero.
    pub all_ignored: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub optical_stem: PatchEmbed,
    pub dsm_stem: PatchEmbed,
    pub optical_stages: Vec<StreamStage>,
    pub dsm_stages: Vec<StreamStage>,
    pub fusions: Vec<StageFusion>,
    pub optical_down: Vec<Downsample>,
    pub dsm_down: Vec<Downsample>,
    pub decoder: Vec<DecoderBlock>,
    pub aux_heads: Vec<Head>,
    pub head: Head,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((model, store))
    }

    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let n = ch.len();
        let stages = |name: &str, pb: &mut ParamBuilder<'_, T>| -> Result<Vec<StreamStage>> {
            (0..n)
                .map(|i| StreamStage::new(&mut pb.sub(&format!("{name}.stage{i}")), cfg, ch[i], cfg.blocks_per_stage[i]))
                .collect()
        };
        let optical_stem = PatchEmbed::new(&mut pb.sub("optical.stem"), cfg.optical_channels, ch[0])?;
        let dsm_stem = PatchEmbed::new(&mut pb.sub("dsm.stem"), cfg.dsm_channels, ch[0])?;
        let optical_stages = stages("optical", pb)?;
        let dsm_stages = stages("dsm", pb)?;
        let fusions = (0..n)
            .map(|i| {
                let mut pb = pb.sub(&format!("fusion{i}"));
                Ok(if cfg.use_argfm {
                    StageFusion::Argfm(Box::new(Argfm::new(&mut pb, ch[i], &cfg.argfm())?))
                } else {
                    StageFusion::Concat(Linear::new(&mut pb.sub("proj"), 2 * ch[i], ch[i], true, Init::FanIn)?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let downs = |name: &str, pb: &mut ParamBuilder<'_, T>| -> Result<Vec<Downsample>> {
            (0..n - 1)
                .map(|i| Downsample::new(&mut pb.sub(&format!("{name}.down{i}")), ch[i]))
                .collect()
        };
        let optical_down = downs("optical", pb)?;
        let dsm_down = downs("dsm", pb)?;
        let decoder = (0..n - 1)
            .rev()
            .map(|k| {
                let mut pb = pb.sub(&format!("decoder{k}"));
                let deep = if k + 2 == n { ch[n - 1] } else { cfg.decoder_width(k + 1) };
                let dw = cfg.decoder_width(k);
                Ok(DecoderBlock {
                    reduce: Linear::new(&mut pb.sub("reduce"), deep + ch[k], dw, true, Init::FanIn)?,
                    conv: DepthwiseConv::new(&mut pb.sub("conv"), dw, 3)?,
                    norm: LayerNorm::new(&mut pb.sub("norm"), dw)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // decoder block j outputs stage n-2-j resolution
        let aux_heads = (0..cfg.aux_head_count)
            .map(|j| {
                let k = n - 2 - j;
                Ok(Head {
                    proj: Linear::new(&mut pb.sub(&format!("aux_head{j}")), cfg.decoder_width(k), cfg.num_classes, true, Init::FanIn)?,
                    upsample: STEM_STRIDE << k,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head {
            proj: Linear::new(&mut pb.sub("head"), cfg.decoder_width(0), cfg.num_classes, true, Init::FanIn)?,
            upsample: STEM_STRIDE,
        };
        Ok(Self {
            cfg: cfg.clone(),
            optical_stem,
            dsm_stem,
            optical_stages,
            dsm_stages,
            fusions,
            optical_down,
            dsm_down,
            decoder,
            aux_heads,
            head,
        })
    }

    /// `(F_o, F_e, F_f)` of stage `i`, before downsampling.
    pub fn encoder_stage<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        f_o: Var<'g, T>,
        f_e: Var<'g, T>,
        i: usize,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
        let f_o = self.optical_stages[i].forward(cx, f_o)?;
        let f_e = self.dsm_stages[i].forward(cx, f_e)?;
        match &self.fusions[i] {
            StageFusion::Argfm(m) => {
                let out = m.forward(cx, f_o, f_e)?;
                Ok((out.f_o, out.f_e, out.fused))
            }
            StageFusion::Concat(proj) => {
                let s = f_o.shape();
                let x = concat(&[f_o, f_e], 0)?;
                let fused = proj.forward(cx, x.chw_to_tokens()?)?.tokens_to_chw(s[1], s[2])?;
                Ok((f_o, f_e, fused))
            }
        }
    }

    pub fn check_input(&self, optical: &[usize], dsm: &[usize]) -> Result<()> {
        let m = self.cfg.input_multiple();
        if optical.len() != 3 || optical[0] != self.cfg.optical_channels {
            return Err(shape_err("model", format!("optical input {optical:?}")));
        }
        if dsm.len() != 3 || dsm[0] != self.cfg.dsm_channels || dsm[1..] != optical[1..] {
            return Err(shape_err("model", format!("elevation input {dsm:?} for optical {optical:?}")));
        }
        if !optical[1].is_multiple_of(m) || !optical[2].is_multiple_of(m) {
            return Err(shape_err(
                "model",
                format!("input {}x{} is not divisible by {m}", optical[1], optical[2]),
            ));
        }
        Ok(())
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, optical: Var<'g, T>, dsm: Var<'g, T>) -> Result<ForwardOutput<'g, T>> {
        self.check_input(&optical.shape(), &dsm.shape())?;
        let mut f_o = self.optical_stem.forward(cx, optical)?;
        let mut f_e = self.dsm_stem.forward(cx, dsm)?;
        let n = self.cfg.num_stages();
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            let (o, e, f) = self.encoder_stage(cx, f_o, f_e, i)?;
            skips.push(f);
            if i + 1 < n {
                f_o = self.optical_down[i].forward(cx, o)?;
                f_e = self.dsm_down[i].forward(cx, e)?;
            }
        }
        let mut x = skips[n - 1];
        let mut aux_logits = Vec::with_capacity(self.aux_heads.len());
        for (j, block) in self.decoder.iter().enumerate() {
            x = block.forward(cx, x, skips[n - 2 - j])?;
            if let Some(h) = self.aux_heads.get(j) {
                aux_logits.push(h.forward(cx, x)?);
            }
        }
        Ok(ForwardOutput {
            logits: self.head.forward(cx, x)?,
            aux_logits,
            fused_skips: skips,
        })
    }

    /// Main cross-entropy plus the weighted auxiliary terms.
    pub fn loss<'g, T: Scalar>(&self, out: &ForwardOutput<'g, T>, labels: &[u8]) -> Result<LossOutput<'g, T>> {
        let (mut loss, valid) = out.logits.cross_entropy(labels)?;
        for aux in &out.aux_logits {
            let (l, _) = aux.cross_entropy(labels)?;
            loss = loss.add(l.scale(T::lit(self.cfg.aux_loss_weight)))?;
        }
        Ok(LossOutput {
            loss,
            valid_pixels: valid,
            all_ignored: valid == 0,
        })
    }

    /// Main-head logits `[K,H,W]` without recording a tape.
    pub fn predict_logits<T: Scalar>(&self, store: &ParamStore<T>, optical: &Tensor<T>, dsm: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, store);
        let out = self.forward(&cx, g.constant(optical.clone()), g.constant(dsm.clone()))?;
        Ok(out.logits.value().as_ref().clone())
    }

    /// Per-pixel argmax class ids.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, optical: &Tensor<T>, dsm: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(argmax_classes(&self.predict_logits(store, optical, dsm)?))
    }
}

/// Argmax over the class axis of `[K,H,W]` logits; ties go to the lower id.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.dim(0);
    let n = logits.len() / k.max(1);
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if logits.data()[c * n + p] > logits.data()[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            state_dim: 2,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = micro();
        let (m, store) = Model::new::<f64>(&cfg, 0).unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let opt = g.constant(Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.01).sin()));
        let dsm = g.constant(Tensor::from_fn(&[1, 32, 32], |i| (i as f64 * 0.03).cos()));
        let out = m.forward(&cx, opt, dsm).unwrap();
        assert_eq!(out.logits.shape(), vec![6, 32, 32]);
        assert_eq!(out.aux_logits.len(), 2);
        assert!(out.aux_logits.iter().all(|a| a.shape() == vec![6, 32, 32]));
        let shapes: Vec<_> = out.fused_skips.iter().map(|f| f.shape()).collect();
        assert_eq!(shapes, vec![vec![4, 8, 8], vec![8, 4, 4], vec![16, 2, 2], vec![32, 1, 1]]);
        assert!(out.logits.value().all_finite());
    }

    #[test]
    fn rejects_indivisible_input() {
        let (m, store) = Model::new::<f64>(&micro(), 0).unwrap();
        let r = m.predict_logits(&store, &Tensor::zeros(&[3, 48, 40]), &Tensor::zeros(&[1, 48, 40]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn too_many_aux_heads() {
        let cfg = ModelConfig {
            aux_head_count: 3,
            ..micro()
        };
        assert!(matches!(Model::new::<f64>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_ties_low() {
        let l = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&l), vec![0, 1]);
    }
}
