//! Spatial operators on channel-first `[C,H,W]` maps.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims3(s: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if s.len() != 3 {
        return Err(shape_err(op, format!("expected [C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Source taps `(i0, i1, w1)` of an align-corners=false bilinear resize
/// from `n_in` to `n_in * factor` samples.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-channel `k x k` convolution (cross-correlation), zero padding
    /// `(k-1)/2`, stride 1. `kernel` is `[C,k,k]`.
    pub fn depthwise_conv2d(self, kernel: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let kv = kernel.value();
        let (c, h, w) = dims3(x.shape(), "depthwise_conv2d")?;
        let ks = kv.shape();
        if ks.len() != 3 || ks[0] != c || ks[1] != ks[2] {
            return Err(shape_err("depthwise_conv2d", format!("kernel {ks:?} for {c} channels")));
        }
        let k = ks[1];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        let p = (k - 1) / 2;
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
            let kc = &kv.data()[ch * k * k..(ch + 1) * k * k];
            let oc = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let sy = y + dy;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = xx + dx;
                            if sx < p || sx - p >= w {
                                continue;
                            }
                            acc += kc[dy * k + dx] * xc[(sy - p) * w + sx - p];
                        }
                    }
                    oc[y * w + xx] = acc;
                }
            }
        }
        let out = Tensor::new(&[c, h, w], out)?;
        Ok(self.graph().op(
            out,
            &[self, kernel],
            Box::new(move |g, inp, _| {
                let (x, kv) = (&inp[0], &inp[1]);
                let mut gx = vec![T::zero(); c * h * w];
                let mut gk = vec![T::zero(); c * k * k];
                for ch in 0..c {
                    let off = ch * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g.data()[off + y * w + xx];
                            if gv == T::zero() {
                                continue;
                            }
                            for dy in 0..k {
                                let sy = y + dy;
                                if sy < p || sy - p >= h {
                                    continue;
                                }
                                for dx in 0..k {
                                    let sx = xx + dx;
                                    if sx < p || sx - p >= w {
                                        continue;
                                    }
                                    let si = off + (sy - p) * w + sx - p;
                                    let ki = ch * k * k + dy * k + dx;
                                    gx[si] += gv * kv.data()[ki];
                                    gk[ki] += gv * x.data()[si];
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(&[c, h, w], gx).expect("dwconv grad"),
                    Tensor::new(&[c, k, k], gk).expect("dwconv grad"),
                ]
            }),
        ))
    }

    /// Dense convolution, weight `[C_out, C_in, k, k]`, optional bias
    /// `[C_out]`, zero padding `pad`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let wv = weight.value();
        let (cin, h, w) = dims3(x.shape(), "conv2d")?;
        let ws = wv.shape();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", format!("weight {ws:?} for input {:?}", x.shape())));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        // tap (oy, dy) -> source row, None when it falls in the padding
        let src = move |o: usize, d: usize, n: usize| -> Option<usize> {
            let s = o * stride + d;
            (s >= pad && s - pad < n).then(|| s - pad)
        };
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            let b0 = bias.map(|b| b.value().data()[co]).unwrap_or_else(T::zero);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b0;
                    for ci in 0..cin {
                        for dy in 0..k {
                            let Some(sy) = src(oy, dy, h) else { continue };
                            for dx in 0..k {
                                let Some(sx) = src(ox, dx, w) else { continue };
                                acc += wv.data()[((co * cin + ci) * k + dy) * k + dx] * x.data()[(ci * h + sy) * w + sx];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let out = Tensor::new(&[cout, ho, wo], out)?;
        let parents: Vec<Var<'g, T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Ok(self.graph().op(
            out,
            &parents,
            Box::new(move |g, inp, _| {
                let (x, wv) = (&inp[0], &inp[1]);
                let mut gx = vec![T::zero(); cin * h * w];
                let mut gw = vec![T::zero(); cout * cin * k * k];
                let mut gb = vec![T::zero(); cout];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g.data()[(co * ho + oy) * wo + ox];
                            gb[co] += gv;
                            for ci in 0..cin {
                                for dy in 0..k {
                                    let Some(sy) = src(oy, dy, h) else { continue };
                                    for dx in 0..k {
                                        let Some(sx) = src(ox, dx, w) else { continue };
                                        let wi = ((co * cin + ci) * k + dy) * k + dx;
                                        let xi = (ci * h + sy) * w + sx;
                                        gx[xi] += gv * wv.data()[wi];
                                        gw[wi] += gv * x.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Tensor::new(&[cin, h, w], gx).expect("conv grad"),
                    Tensor::new(&[cout, cin, k, k], gw).expect("conv grad"),
                ];
                if inp.len() == 3 {
                    grads.push(Tensor::new(&[cout], gb).expect("conv grad"));
                }
                grads
            }),
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edge
    /// clamped).
    pub fn upsample_bilinear(self, factor: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (c, h, w) = dims3(x.shape(), "upsample_bilinear")?;
        if factor == 0 {
            return Err(shape_err("upsample_bilinear", "factor 0"));
        }
        let ty: Vec<(usize, usize, T)> = bilinear_taps(h, factor).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
        let tx: Vec<(usize, usize, T)> = bilinear_taps(w, factor).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = xc[y0 * w + x0] * (T::one() - fx) + xc[y0 * w + x1] * fx;
                    let bot = xc[y1 * w + x0] * (T::one() - fx) + xc[y1 * w + x1] * fx;
                    out[(ch * ho + oy) * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.graph().op(
            out,
            &[self],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let gc = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g.data()[(ch * ho + oy) * wo + ox];
                            let (gt, gbm) = (gv * (T::one() - fy), gv * fy);
                            gc[y0 * w + x0] += gt * (T::one() - fx);
                            gc[y0 * w + x1] += gt * fx;
                            gc[y1 * w + x0] += gbm * (T::one() - fx);
                            gc[y1 * w + x1] += gbm * fx;
                        }
                    }
                }
                vec![Tensor::new(&[c, h, w], gx).expect("bilinear grad")]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn even_depthwise_kernel_rejected() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(x.depthwise_conv2d(k), Err(Error::Config(_))));
    }

    #[test]
    fn strided_conv_patchifies() {
        // 2x2 stride-2 sum kernel on a 1x4x4 ramp
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = x.conv2d(w, None, 2, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[10., 18., 42., 50.]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(&[2, 3, 3], 1.5));
        let y = x.upsample_bilinear(4).unwrap().value();
        assert_eq!(y.shape(), &[2, 12, 12]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }
}
