//! Windowed raster scan orders and the gather/scatter between `[C,H,W]`
//! maps and `[L,C]` token sequences.
//!
//! A window order visits windows in row-major grid order and the pixels of
//! each window in row-major order, so every window occupies a contiguous
//! run of `window_len` sequence positions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a scale `s` maps to windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// `s x s` grid of `(H/s) x (W/s)` windows; `s = 1` is one global window.
    #[default]
    Divide,
    /// `(H/s) x (W/s)` grid of `s x s` windows.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOrder {
    perm: Vec<usize>,
    h: usize,
    w: usize,
    scale: usize,
    direction: Direction,
    window_len: usize,
}

impl ScanOrder {
    /// Wraps an arbitrary permutation of `0..h*w` as a single-window order.
    pub fn from_perm(perm: Vec<usize>, h: usize, w: usize) -> Result<Self> {
        if perm.len() != h * w {
            return Err(shape_err("ScanOrder", format!("{} entries for {}x{}", perm.len(), h, w)));
        }
        if !is_permutation(&perm) {
            return Err(Error::Domain("scan order is not a bijection".into()));
        }
        Ok(Self {
            window_len: perm.len(),
            perm,
            h,
            w,
            scale: 1,
            direction: Direction::Forward,
        })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Tokens per window; windows are contiguous runs of this length.
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn is_bijection(&self) -> bool {
        is_permutation(&self.perm)
    }

    /// The same traversal run backwards.
    pub fn reversed(&self) -> Self {
        Self {
            perm: self.perm.iter().rev().copied().collect(),
            direction: match self.direction {
                Direction::Forward => Direction::Backward,
                Direction::Backward => Direction::Forward,
            },
            ..self.clone()
        }
    }

    /// `inverse[perm[i]] == i`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

/// Window height and width for scale `s`.
pub fn window_dims(h: usize, w: usize, s: usize, mode: WindowMode) -> Result<(usize, usize)> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Config(format!("{h}x{w} grid is not divisible by scale {s}")));
    }
    Ok(match mode {
        WindowMode::Divide => (h / s, w / s),
        WindowMode::Literal => (s, s),
    })
}

pub fn window_order(h: usize, w: usize, s: usize, mode: WindowMode) -> Result<ScanOrder> {
    let (wh, ww) = window_dims(h, w, s, mode)?;
    let mut perm = Vec::with_capacity(h * w);
    for gy in 0..h / wh {
        for gx in 0..w / ww {
            for y in 0..wh {
                for x in 0..ww {
                    perm.push((gy * wh + y) * w + gx * ww + x);
                }
            }
        }
    }
    Ok(ScanOrder {
        perm,
        h,
        w,
        scale: s,
        direction: Direction::Forward,
        window_len: wh * ww,
    })
}

/// Shared read-only copy of [`window_order`], built once per key.
pub fn cached_window_order(h: usize, w: usize, s: usize, mode: WindowMode) -> Result<Arc<ScanOrder>> {
    type Cache = Mutex<HashMap<(usize, usize, usize, WindowMode), Arc<ScanOrder>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (h, w, s, mode);
    if let Some(o) = cache.lock().expect("order cache").get(&key) {
        return Ok(o.clone());
    }
    let order = Arc::new(window_order(h, w, s, mode)?);
    cache.lock().expect("order cache").insert(key, order.clone());
    Ok(order)
}

/// `(order, reversed order)`.
pub fn two_way(order: &ScanOrder) -> (ScanOrder, ScanOrder) {
    (order.clone(), order.reversed())
}

/// `[C,H,W]` -> `[L,C]` in scan order.
pub fn gather<T: Scalar>(x: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    check_dims(x.shape(), order)?;
    let c = x.dim(0);
    let l = order.len();
    let mut out = Vec::with_capacity(l * c);
    for &p in order.perm() {
        for ch in 0..c {
            out.push(x.data()[ch * l + p]);
        }
    }
    Tensor::new(&[l, c], out)
}

/// Inverse of [`gather`]: `[L,C]` -> `[C,H,W]`.
pub fn scatter<T: Scalar>(y: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    let l = order.len();
    if y.rank() != 2 || y.dim(0) != l {
        return Err(shape_err("scatter", format!("{:?} for an order of length {}", y.shape(), l)));
    }
    let c = y.dim(1);
    let mut out = vec![T::zero(); c * l];
    for (i, &p) in order.perm().iter().enumerate() {
        for ch in 0..c {
            out[ch * l + p] = y.data()[i * c + ch];
        }
    }
    Tensor::new(&[c, order.height(), order.width()], out)
}

fn check_dims(shape: &[usize], order: &ScanOrder) -> Result<()> {
    if shape.len() != 3 || shape[1] != order.height() || shape[2] != order.width() {
        return Err(shape_err(
            "gather",
            format!("{:?} for a {}x{} order", shape, order.height(), order.width()),
        ));
    }
    Ok(())
}

/// Differentiable [`gather`].
pub fn gather_var<'g, T: Scalar>(x: Var<'g, T>, order: &ScanOrder) -> Result<Var<'g, T>> {
    check_dims(&x.shape(), order)?;
    x.chw_to_tokens()?.rows(order.perm())
}

/// Differentiable [`scatter`].
pub fn scatter_var<'g, T: Scalar>(y: Var<'g, T>, order: &ScanOrder) -> Result<Var<'g, T>> {
    let s = y.shape();
    if s.len() != 2 || s[0] != order.len() {
        return Err(shape_err("scatter", format!("{:?} for an order of length {}", s, order.len())));
    }
    y.rows(&order.inverse())?.tokens_to_chw(order.height(), order.width())
}
