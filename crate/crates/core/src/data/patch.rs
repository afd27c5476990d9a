use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SceneSample;

/// How the right/bottom remainder of a non-multiple image is covered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    /// The last patch is moved inward to end at the border, overlapping its
    /// neighbour; no padding is needed.
    #[default]
    ShiftInward,
    /// Patches continue on the stride grid and the image is extended by
    /// reflection.
    MirrorPad,
}

/// Patch start offsets along one axis.
pub fn patch_origins(len: usize, patch: usize, stride: usize, policy: PatchPolicy) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if patch > len {
        return Err(Error::Config(format!("patch {patch} larger than image side {len}")));
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + patch <= len).collect();
    let last_end = out.last().map_or(0, |&p| p + patch);
    if last_end < len {
        match policy {
            PatchPolicy::ShiftInward => out.push(len - patch),
            PatchPolicy::MirrorPad => out.push(out.last().map_or(0, |&p| p + stride)),
        }
    }
    Ok(out)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Cuts a sample into `patch x patch` tiles; each tile records its origin
/// under `meta.patch`.
pub fn patchify(sample: &SceneSample, patch: usize, stride: usize, policy: PatchPolicy) -> Result<Vec<SceneSample>> {
    let (h, w) = (sample.height(), sample.width());
    let ys = patch_origins(h, patch, stride, policy)?;
    let xs = patch_origins(w, patch, stride, policy)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let src = |y: usize, x: usize| reflect(y0 + y, h) * w + reflect(x0 + x, w);
            let plane = |t: &Tensor<f32>, c: usize| -> Vec<f32> {
                let d = &t.data()[c * h * w..(c + 1) * h * w];
                (0..patch * patch).map(|i| d[src(i / patch, i % patch)]).collect()
            };
            let optical: Vec<f32> = (0..3).flat_map(|c| plane(&sample.optical, c)).collect();
            let labels = (0..patch * patch).map(|i| sample.labels[src(i / patch, i % patch)]).collect();
            let mut meta = sample.meta.clone();
            if let Some(m) = meta.as_object_mut() {
                m.insert(
                    "patch".into(),
                    serde_json::json!({ "y": y0, "x": x0, "size": patch, "policy": policy }),
                );
            }
            out.push(SceneSample {
                optical: Tensor::new(&[3, patch, patch], optical)?,
                dsm: Tensor::new(&[1, patch, patch], plane(&sample.dsm, 0))?,
                labels,
                seed: sample.seed,
                meta,
            });
        }
    }
    Ok(out)
}
