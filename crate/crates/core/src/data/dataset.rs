use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::netpbm::{self, Raster};
use super::scene::{generate_scene, GeneratorSpec};
use super::SceneSample;

pub const OPTICAL_FILE: &str = "optical.ppm";
pub const DSM_FILE: &str = "dsm.pgm";
pub const LABELS_FILE: &str = "labels.pgm";
pub const META_FILE: &str = "meta.json";
const MANIFEST_FILE: &str = "manifest.json";

/// Elevation quantization step (meters) unless the range needs a coarser one.
const DSM_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct DsmEncoding {
    scale: f64,
    offset: f64,
}

fn to_u8(v: f32) -> u16 {
    (v as f64 * 255.0).round().clamp(0.0, 255.0) as u16
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes the three rasters and `meta.json` into `dir`.
pub fn save_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    let optical = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| to_u8(s.optical.data()[c * plane + i]))
        .collect();
    write(
        &dir.join(OPTICAL_FILE),
        &netpbm::encode(&Raster {
            width: w,
            height: h,
            channels: 3,
            maxval: 255,
            samples: optical,
        })?,
    )?;

    let (lo, hi) = s
        .dsm
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    let enc = DsmEncoding {
        scale: DSM_STEP.max((hi - lo) / 65535.0),
        offset: lo,
    };
    let dsm = s
        .dsm
        .data()
        .iter()
        .map(|&v| ((v as f64 - enc.offset) / enc.scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write(
        &dir.join(DSM_FILE),
        &netpbm::encode(&Raster {
            width: w,
            height: h,
            channels: 1,
            maxval: 65535,
            samples: dsm,
        })?,
    )?;
    write(
        &dir.join(LABELS_FILE),
        &netpbm::encode(&Raster {
            width: w,
            height: h,
            channels: 1,
            maxval: 255,
            samples: s.labels.iter().map(|&l| l as u16).collect(),
        })?,
    )?;

    let mut meta = match &s.meta {
        serde_json::Value::Object(m) => m.clone(),
        serde_json::Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("user".into(), other.clone());
            m
        }
    };
    meta.insert("seed".into(), s.seed.into());
    meta.insert("height".into(), h.into());
    meta.insert("width".into(), w.into());
    meta.insert("dsm_encoding".into(), serde_json::to_value(enc)?);
    write(&dir.join(META_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn decode_file(path: &Path) -> Result<Raster> {
    netpbm::decode(&read(path)?).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let meta: serde_json::Value = serde_json::from_slice(&read(&dir.join(META_FILE))?)?;
    let opt = decode_file(&dir.join(OPTICAL_FILE))?;
    let dsm = decode_file(&dir.join(DSM_FILE))?;
    let lab = decode_file(&dir.join(LABELS_FILE))?;
    let (h, w) = (opt.height, opt.width);
    for (name, r, ch) in [(OPTICAL_FILE, &opt, 3), (DSM_FILE, &dsm, 1), (LABELS_FILE, &lab, 1)] {
        if (r.height, r.width, r.channels) != (h, w, ch) {
            return Err(Error::Config(format!(
                "{}: {}x{}x{} raster does not match {h}x{w}x{ch}",
                dir.join(name).display(),
                r.height,
                r.width,
                r.channels
            )));
        }
    }
    if lab.maxval > 255 {
        return Err(Error::Config(format!("{}: labels must be 8-bit", dir.join(LABELS_FILE).display())));
    }
    let plane = h * w;
    let omax = opt.maxval as f32;
    let optical = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let v = opt.samples[p * 3 + c];
        if opt.maxval == 255 {
            v as f32 / 255.0
        } else {
            v as f32 / omax
        }
    });
    let enc: DsmEncoding = match meta.get("dsm_encoding") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => DsmEncoding {
            scale: 1.0,
            offset: 0.0,
        },
    };
    let dsm = Tensor::from_fn(&[1, h, w], |i| (enc.offset + enc.scale * dsm.samples[i] as f64) as f32);
    let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    Ok(SceneSample {
        optical,
        dsm,
        labels: lab.samples.iter().map(|&v| v as u8).collect(),
        seed,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    /// `(split name, sample count)` in generation order.
    pub splits: Vec<(String, usize)>,
    pub generator: GeneratorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub splits: BTreeMap<String, Vec<String>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` of split number `split` under a dataset seed.
pub fn sample_seed(seed: u64, split: usize, index: usize) -> u64 {
    splitmix(seed ^ splitmix(((split as u64) << 32) | index as u64))
}

/// Generates and writes a dataset. An existing non-empty `root` is only
/// overwritten with `force`.
pub fn write_dataset(root: &Path, spec: &DatasetSpec, force: bool) -> Result<Manifest> {
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        for (name, _) in &spec.splits {
            let p = root.join(name);
            if p.exists() {
                fs::remove_dir_all(&p)?;
            }
        }
    }
    fs::create_dir_all(root)?;
    let mut splits = BTreeMap::new();
    for (si, (name, count)) in spec.splits.iter().enumerate() {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("invalid split name `{name}`")));
        }
        let mut ids = Vec::with_capacity(*count);
        for i in 0..*count {
            let id = format!("{name}_{i:04}");
            let sample = generate_scene(&spec.generator, sample_seed(spec.seed, si, i))?;
            save_sample(&root.join(name).join(&id), &sample)?;
            ids.push(id);
        }
        splits.insert(name.clone(), ids);
    }
    let manifest = Manifest {
        seed: spec.seed,
        generator: spec.generator.clone(),
        splits,
    };
    write(&root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&read(&root.join(MANIFEST_FILE))?)?)
}

/// Every sample of a split, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<(String, SceneSample)>> {
    let manifest = read_manifest(root)?;
    let ids = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Config(format!("split `{split}` not in {}", root.join(MANIFEST_FILE).display())))?;
    ids.iter()
        .map(|id| Ok((id.clone(), load_sample(&root.join(split).join(id))?)))
        .collect()
}
