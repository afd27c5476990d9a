//! Pointwise operations and same-rank broadcasting.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Source index in `src_shape` for every element of `out_shape` under
/// numpy-style broadcasting of equal-rank shapes.
fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for a in (0..rank).rev() {
        src_strides[a] = if src_shape[a] == 1 { 0 } else { acc };
        acc *= src_shape[a];
    }
    let mut idx = vec![0usize; n];
    let mut coord = vec![0usize; rank];
    for slot in idx.iter_mut() {
        *slot = coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum();
        for a in (0..rank).rev() {
            coord[a] += 1;
            if coord[a] < out_shape[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    idx
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(f);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, inp, y| {
                let d = inp[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Tensor::new(inp[0].shape(), d).expect("unary grad")]
            }),
        )
    }

    pub fn silu(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    fn binary(
        self,
        rhs: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T) -> T + 'static,
        dfb: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), rhs.value());
        let shape = broadcast_shape(a.shape(), b.shape(), op)?;
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, f)?;
            return Ok(self.graph().op(
                out,
                &[self, rhs],
                Box::new(move |g, inp, _| {
                    let (a, b) = (&inp[0], &inp[1]);
                    let ga = Tensor::from_fn(a.shape(), |i| g.data()[i] * dfa(a.data()[i], b.data()[i]));
                    let gb = Tensor::from_fn(b.shape(), |i| g.data()[i] * dfb(a.data()[i], b.data()[i]));
                    vec![ga, gb]
                }),
            ));
        }
        let ia = Rc::new(broadcast_index(a.shape(), &shape));
        let ib = Rc::new(broadcast_index(b.shape(), &shape));
        let out = Tensor::from_fn(&shape, |i| f(a.data()[ia[i]], b.data()[ib[i]]));
        Ok(self.graph().op(
            out,
            &[self, rhs],
            Box::new(move |g, inp, _| {
                let (a, b) = (&inp[0], &inp[1]);
                let n = g.len();
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for i in 0..n {
                        let (av, bv) = (a.data()[ia[i]], b.data()[ib[i]]);
                        gad[ia[i]] += g.data()[i] * dfa(av, bv);
                        gbd[ib[i]] += g.data()[i] * dfb(av, bv);
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with same-rank broadcasting.
    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    /// Elementwise product with same-rank broadcasting.
    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph().op(
            out,
            &[self],
            Box::new(|g, inp, _| vec![Tensor::full(inp[0].shape(), g.item())]),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = T::from_usize_lossy(self.value().len());
        self.sum_all().scale(T::one() / n)
    }

    /// `sum(self * weights)` against a constant weight tensor; used to turn
    /// tensor outputs into scalars for gradient checks.
    pub fn dot_const(self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let w = self.graph().constant(weights.clone());
        Ok(self.mul(w)?.sum_all())
    }
}
