//! Synthetic optical + elevation scenes, raster I/O and patch tiling.

pub mod netpbm;
pub mod scene;

mod dataset;
mod patch;

pub use dataset::{load_sample, load_split, read_manifest, sample_seed, save_sample, write_dataset, DatasetSpec, Manifest, DSM_FILE, LABELS_FILE, META_FILE, OPTICAL_FILE};
pub use patch::{patch_origins, patchify, PatchPolicy};
pub use scene::{generate_scene, GeneratorSpec, CLASS_NAMES};

use crate::tensor::{Scalar, Tensor};

/// Elevation is shifted to its minimum and divided by this many meters.
pub const DSM_NORM_METERS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3,H,W]` in `[0,1]`.
    pub optical: Tensor<f32>,
    /// `[1,H,W]` in meters.
    pub dsm: Tensor<f32>,
    /// `H*W` class ids, row-major.
    pub labels: Vec<u8>,
    pub seed: u64,
    pub meta: serde_json::Value,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.optical.dim(1)
    }

    pub fn width(&self) -> usize {
        self.optical.dim(2)
    }

    /// Network inputs: optical centered on zero, elevation relative to the
    /// scene minimum in units of [`DSM_NORM_METERS`].
    pub fn model_inputs<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>) {
        let optical = Tensor::from_fn(self.optical.shape(), |i| T::lit(self.optical.data()[i] as f64 - 0.5));
        let min = self.dsm.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let dsm = Tensor::from_fn(self.dsm.shape(), |i| T::lit((self.dsm.data()[i] as f64 - min) / DSM_NORM_METERS));
        (optical, dsm)
    }

    /// Per-class pixel counts.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if let Some(c) = h.get_mut(l as usize) {
                *c += 1;
            }
        }
        h
    }
}
