use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IGNORE_INDEX: u8 = 255;

impl<'g, T: Scalar> Var<'g, T> {
    /// Mean pixelwise cross-entropy of `[K,H,W]` logits against `H*W`
    /// labels. Pixels labelled [`IGNORE_INDEX`] are excluded. Returns the
    /// scalar loss and the number of counted pixels; when every pixel is
    /// ignored the loss is exactly zero.
    pub fn cross_entropy(self, labels: &[u8]) -> Result<(Var<'g, T>, usize)> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[1] * s[2] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} vs {} labels", s, labels.len()),
            ));
        }
        let k = s[0];
        let n = labels.len();
        for (i, &l) in labels.iter().enumerate() {
            if l != IGNORE_INDEX && l as usize >= k {
                return Err(Error::Label {
                    label: l as u32,
                    index: i,
                    num_classes: k,
                });
            }
        }
        let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        let mut probs = vec![T::zero(); k * n];
        let mut total = T::zero();
        for p in 0..n {
            let m = (0..k).map(|c| x.data()[c * n + p]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|c| (x.data()[c * n + p] - m).exp()).sum();
            for c in 0..k {
                probs[c * n + p] = (x.data()[c * n + p] - m).exp() / z;
            }
            let l = labels[p];
            if l != IGNORE_INDEX {
                total += z.ln() + m - x.data()[l as usize * n + p];
            }
        }
        let denom = if valid == 0 { T::one() } else { T::from_usize_lossy(valid) };
        let loss = if valid == 0 { T::zero() } else { total / denom };
        let labels = labels.to_vec();
        let shape = s.to_vec();
        let out = self.graph().op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _, _| {
                let scale = g.item() / denom;
                let mut gx = vec![T::zero(); k * n];
                for p in 0..n {
                    let l = labels[p];
                    if l == IGNORE_INDEX {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == l as usize { T::one() } else { T::zero() };
                        gx[c * n + p] = (probs[c * n + p] - onehot) * scale;
                    }
                }
                vec![Tensor::new(&shape, gx).expect("ce grad")]
            }),
        );
        Ok((out, valid))
    }
}
