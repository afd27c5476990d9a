//! Seeded synthetic aerial scenes with optical, elevation and label rasters.
//!
//! The background is impervious ground. Low vegetation and trees are
//! elliptical blobs, buildings are rectangles, cars are small rectangles
//! and clutter is a patch of random texture. Objects are drawn in that
//! order (low vegetation, buildings, trees, cars, clutter) and later ones
//! occlude earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SceneSample;

pub const CLASS_NAMES: [&str; 6] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];
pub const IMPERVIOUS: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEG: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;
pub const CLUTTER: u8 = 5;

/// Appearance and elevation of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub color: [f64; 3],
    /// Object heights are drawn uniformly from this range (meters).
    pub height: [f64; 2],
    pub height_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub buildings: usize,
    pub trees: usize,
    pub low_veg: usize,
    pub cars: usize,
    pub clutter: usize,
    /// Side length range of buildings (pixels).
    pub building_size: [usize; 2],
    /// Radius range of trees and vegetation blobs.
    pub tree_radius: [usize; 2],
    pub low_veg_radius: [usize; 2],
    /// Short and long side of a car.
    pub car_size: [usize; 2],
    pub clutter_size: [usize; 2],
    /// Per-class style, indexed by class id.
    pub styles: Vec<ClassStyle>,
    pub optical_noise: f64,
    /// Random terrain offset added to the whole DSM, uniform in `[0, x]`.
    pub terrain_offset: f64,
}

fn style(color: [f64; 3], height: [f64; 2], height_noise: f64) -> ClassStyle {
    ClassStyle {
        color,
        height,
        height_noise,
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            buildings: 2,
            trees: 3,
            low_veg: 2,
            cars: 2,
            clutter: 1,
            building_size: [14, 24],
            tree_radius: [5, 8],
            low_veg_radius: [8, 13],
            car_size: [6, 10],
            clutter_size: [8, 12],
            styles: vec![
                style([0.55, 0.55, 0.57], [0.0, 0.0], 0.05),
                style([0.78, 0.38, 0.32], [6.0, 25.0], 0.1),
                style([0.55, 0.78, 0.35], [0.2, 0.2], 0.05),
                style([0.12, 0.42, 0.15], [3.0, 10.0], 0.4),
                style([0.15, 0.25, 0.85], [1.5, 1.5], 0.1),
                style([0.85, 0.75, 0.2], [0.0, 3.0], 0.5),
            ],
            optical_noise: 0.03,
            terrain_offset: 40.0,
        }
    }
}

impl GeneratorSpec {
    /// Default spec at another size, object counts scaled with area.
    pub fn with_size(height: usize, width: usize) -> Self {
        let d = Self::default();
        let f = (height * width) as f64 / (d.height * d.width) as f64;
        let scale = |n: usize| ((n as f64 * f).round() as usize).max(usize::from(n > 0));
        Self {
            height,
            width,
            buildings: scale(d.buildings),
            trees: scale(d.trees),
            low_veg: scale(d.low_veg),
            cars: scale(d.cars),
            clutter: scale(d.clutter),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!("scenes must be at least 32x32, got {}x{}", self.height, self.width)));
        }
        if self.styles.len() != CLASS_NAMES.len() {
            return Err(Error::Config(format!("{} class styles for {} classes", self.styles.len(), CLASS_NAMES.len())));
        }
        let ranges = [self.building_size, self.tree_radius, self.low_veg_radius, self.car_size, self.clutter_size];
        if ranges.iter().any(|r| r[0] == 0 || r[0] > r[1]) {
            return Err(Error::Config("object size ranges must be non-empty and positive".into()));
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    heights: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, height: f64, color: [f64; 3]) {
        let i = y * self.w + x;
        self.labels[i] = class;
        self.heights[i] = height;
        self.colors[i] = color;
    }

    fn rect(&mut self, y0: usize, x0: usize, hh: usize, ww: usize, class: u8, height: f64, color: [f64; 3]) {
        for y in y0..(y0 + hh).min(self.h) {
            for x in x0..(x0 + ww).min(self.w) {
                self.paint(y, x, class, height, color);
            }
        }
    }

    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, class: u8, height: f64, color: [f64; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.paint(y, x, class, height, color);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

fn range(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn frange(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Generates one scene; identical `(spec, seed)` give identical samples.
pub fn generate_scene(spec: &GeneratorSpec, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let st = &spec.styles;
    let mut cv = Canvas {
        h,
        w,
        labels: vec![IMPERVIOUS; h * w],
        heights: vec![st[0].height[0]; h * w],
        colors: vec![st[0].color; h * w],
    };
    let pos = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n) as f64 + 0.5;

    for _ in 0..spec.low_veg {
        let (cy, cx) = (pos(&mut rng, h), pos(&mut rng, w));
        let (ry, rx) = (range(&mut rng, spec.low_veg_radius), range(&mut rng, spec.low_veg_radius));
        let col = jitter(&mut rng, st[2].color, 0.04);
        let ht = frange(&mut rng, st[2].height);
        cv.ellipse(cy, cx, ry as f64, rx as f64, LOW_VEG, ht, col);
    }
    for _ in 0..spec.buildings {
        let (bh, bw) = (range(&mut rng, spec.building_size), range(&mut rng, spec.building_size));
        let y0 = rng.random_range(0..h.saturating_sub(bh / 2).max(1));
        let x0 = rng.random_range(0..w.saturating_sub(bw / 2).max(1));
        let col = jitter(&mut rng, st[1].color, 0.05);
        let ht = frange(&mut rng, st[1].height);
        cv.rect(y0, x0, bh, bw, BUILDING, ht, col);
    }
    for _ in 0..spec.trees {
        let (cy, cx) = (pos(&mut rng, h), pos(&mut rng, w));
        let r = range(&mut rng, spec.tree_radius) as f64;
        let col = jitter(&mut rng, st[3].color, 0.04);
        let ht = frange(&mut rng, st[3].height);
        cv.ellipse(cy, cx, r, r, TREE, ht, col);
    }
    for _ in 0..spec.cars {
        let (short, long) = (spec.car_size[0], spec.car_size[1]);
        let (ch, cw) = if rng.random_bool(0.5) { (short, long) } else { (long, short) };
        let y0 = rng.random_range(0..h - ch.min(h - 1));
        let x0 = rng.random_range(0..w - cw.min(w - 1));
        let col = jitter(&mut rng, st[4].color, 0.08);
        cv.rect(y0, x0, ch, cw, CAR, st[4].height[0], col);
    }
    for _ in 0..spec.clutter {
        let (ch, cw) = (range(&mut rng, spec.clutter_size), range(&mut rng, spec.clutter_size));
        let y0 = rng.random_range(0..h - ch.min(h - 1));
        let x0 = rng.random_range(0..w - cw.min(w - 1));
        for y in y0..(y0 + ch).min(h) {
            for x in x0..(x0 + cw).min(w) {
                let col = jitter(&mut rng, st[5].color, 0.15);
                let ht = frange(&mut rng, st[5].height);
                cv.paint(y, x, CLUTTER, ht, col);
            }
        }
    }

    let base = rng.random_range(0.0..=spec.terrain_offset.max(0.0));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dsm = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let s = &st[cv.labels[i] as usize];
        dsm.push((base + cv.heights[i] + s.height_noise * unit.sample(&mut rng)) as f32);
    }
    let mut optical = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let v = (cv.colors[i][c] + spec.optical_noise * unit.sample(&mut rng)).clamp(0.0, 1.0);
            // stored on the 8-bit grid so raster files hold it exactly
            optical[c * h * w + i] = (v * 255.0).round() as f32 / 255.0;
        }
    }
    Ok(SceneSample {
        optical: Tensor::new(&[3, h, w], optical)?,
        dsm: Tensor::new(&[1, h, w], dsm)?,
        labels: cv.labels,
        seed,
        meta: serde_json::json!({
            "class_names": CLASS_NAMES,
            "generator": spec,
            "seed": seed,
        }),
    })
}
