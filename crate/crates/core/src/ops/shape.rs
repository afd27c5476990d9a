//! Data movement: every op here is an index gather whose backward is the
//! matching scatter-add.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `out[i] = self[index[i]]` with output shape `shape`.
    pub fn gather_index(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err("gather_index", format!("{} indices for shape {:?}", index.len(), shape)));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(shape_err("gather_index", format!("index {} out of range {}", bad, x.len())));
        }
        let out = Tensor::new(shape, index.iter().map(|&i| x.data()[i]).collect())?;
        Ok(self.graph().op(
            out,
            &[self],
            Box::new(move |g, inp, _| {
                let mut gx = Tensor::zeros(inp[0].shape());
                let d = gx.data_mut();
                for (k, &i) in index.iter().enumerate() {
                    d[i] += g.data()[k];
                }
                vec![gx]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.graph().op(
            out,
            &[self],
            Box::new(|g, inp, _| vec![g.clone().reshape(inp[0].shape()).expect("reshape grad")]),
        ))
    }

    /// General axis permutation; `axes[k]` is the input axis that becomes
    /// output axis `k`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; rank];
        for _ in 0..n {
            index.push(coord.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for k in (0..rank).rev() {
                coord[k] += 1;
                if coord[k] < out_shape[k] {
                    break;
                }
                coord[k] = 0;
            }
        }
        self.gather_index(Rc::new(index), &out_shape)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend(base..base + inner);
            }
        }
        self.gather_index(Rc::new(index), &out_shape)
    }

    /// Selects rows (axis 0) of a rank-2 tensor.
    pub fn rows(self, rows: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err("rows", format!("expected rank 2, got {shape:?}")));
        }
        let c = shape[1];
        let mut index = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= shape[0] {
                return Err(shape_err("rows", format!("row {r} of {}", shape[0])));
            }
            index.extend(r * c..(r + 1) * c);
        }
        self.gather_index(Rc::new(index), &[rows.len(), c])
    }

    /// `[C,H,W]` -> `[H*W, C]`.
    pub fn chw_to_tokens(self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err("chw_to_tokens", format!("expected [C,H,W], got {s:?}")));
        }
        self.reshape(&[s[0], s[1] * s[2]])?.permute(&[1, 0])
    }

    /// `[H*W, C]` -> `[C,H,W]`.
    pub fn tokens_to_chw(self, h: usize, w: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(shape_err("tokens_to_chw", format!("{s:?} cannot fill {h}x{w}")));
        }
        self.permute(&[1, 0])?.reshape(&[s[1], h, w])
    }

    /// Nearest-neighbour upsampling of `[C,H,W]` by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 3 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("{s:?} x{factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    index.push((ch * h + y / factor) * w + x / factor);
                }
            }
        }
        self.gather_index(Rc::new(index), &[c, ho, wo])
    }
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?
        .shape();
    if axis >= first.len() {
        return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
    }
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    for s in &shapes {
        let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
        if !ok {
            return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let sizes: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &sz) in vals.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
        }
    }
    let out = Tensor::new(&out_shape, data)?;
    let graph = parts[0].graph();
    Ok(graph.op(
        out,
        parts,
        Box::new(move |g, inp, _| {
            let mut grads: Vec<Tensor<T>> = inp.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut off = 0;
            for o in 0..outer {
                for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                    let n = sz * inner;
                    gi.data_mut()[o * n..(o + 1) * n].copy_from_slice(&g.data()[off..off + n]);
                    off += n;
                }
            }
            grads
        }),
    ))
}
