//! Matrix products, projections, softmax and layer normalization.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b)?;
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        Ok(self.graph().op(
            out,
            &[self, rhs],
            Box::new(move |g, inp, _| {
                let (a, b) = (&inp[0], &inp[1]);
                let mut ga = vec![T::zero(); m * k];
                matmul_into(g.data(), &transpose_raw(b.data(), k, n), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                matmul_into(&transpose_raw(a.data(), m, k), g.data(), &mut gb, k, m, n);
                vec![
                    Tensor::new(&[m, k], ga).expect("matmul grad"),
                    Tensor::new(&[k, n], gb).expect("matmul grad"),
                ]
            }),
        ))
    }

    /// `x W + b` over the last axis; `W` is `[in, out]`, `b` is `[out]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let wv = w.value();
        let xs = x.shape().to_vec();
        if wv.rank() != 2 || xs.is_empty() || *xs.last().unwrap() != wv.dim(0) {
            return Err(shape_err("linear", format!("input {:?} with weight {:?}", xs, wv.shape())));
        }
        let (k, n) = (wv.dim(0), wv.dim(1));
        let m = x.len() / k;
        if let Some(b) = b {
            if b.shape() != [n] {
                return Err(shape_err("linear", format!("bias {:?} for {} outputs", b.shape(), n)));
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_into(x.data(), wv.data(), &mut out, m, k, n);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let out = Tensor::new(&out_shape, out)?;
        let parents: Vec<Var<'g, T>> = match b {
            Some(b) => vec![self, w, b],
            None => vec![self, w],
        };
        Ok(self.graph().op(
            out,
            &parents,
            Box::new(move |g, inp, _| {
                let (x, w) = (&inp[0], &inp[1]);
                let mut gx = vec![T::zero(); m * k];
                matmul_into(g.data(), &transpose_raw(w.data(), k, n), &mut gx, m, n, k);
                let mut gw = vec![T::zero(); k * n];
                matmul_into(&transpose_raw(x.data(), m, k), g.data(), &mut gw, k, m, n);
                let mut grads = vec![
                    Tensor::new(x.shape(), gx).expect("linear grad"),
                    Tensor::new(&[k, n], gw).expect("linear grad"),
                ];
                if inp.len() == 3 {
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    grads.push(Tensor::new(&[n], gb).expect("linear grad"));
                }
                grads
            }),
        ))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = x.as_ref().clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let m = (0..len).map(|a| d[at(a)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for a in 0..len {
                        let e = (d[at(a)] - m).exp();
                        d[at(a)] = e;
                        z += e;
                    }
                    for a in 0..len {
                        d[at(a)] = d[at(a)] / z;
                    }
                }
            }
        }
        Ok(self.graph().op(
            out,
            &[self],
            Box::new(move |g, _, y| {
                let mut gx = Tensor::zeros(y.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g.data()[at(a)] * y.data()[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y.data()[at(a)] * (g.data()[at(a)] - dot);
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both
    /// shaped like the last axis).
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        let c = *s.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} for width {}", gamma.shape(), beta.shape(), c),
            ));
        }
        let eps = T::lit(eps);
        let cn = T::from_usize_lossy(c);
        let rows = x.len() / c;
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(&s, out)?;
        Ok(self.graph().op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, inp, _| {
                let gamma = &inp[1];
                let mut gx = vec![T::zero(); rows * c];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gamma.data()[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for j in 0..c {
                        let dh = gr[j] * gamma.data()[j];
                        gx[r * c + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                    }
                }
                vec![
                    Tensor::new(inp[0].shape(), gx).expect("ln grad"),
                    Tensor::new(&[c], gg).expect("ln grad"),
                    Tensor::new(&[c], gb).expect("ln grad"),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn linear_rejects_inner_mismatch() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 4]));
        assert!(x.linear(w, None).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1));
        let y = x.softmax(1).unwrap().value();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|a| y.at(&[o, a, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
