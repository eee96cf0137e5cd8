//! Grayscale image datasets: PGM/PNG folders or a synthetic generator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Folder of `.png` / `.pgm` images; synthetic images when absent.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_train")]
    pub train: usize,
    #[serde(default = "d_test")]
    pub test: usize,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Smooth Gaussian bumps per image.
    #[serde(default = "d_blobs")]
    pub blobs: usize,
    /// Straight intensity edges per image.
    #[serde(default = "d_edges")]
    pub edges: usize,
}

fn d_patch() -> usize {
    32
}
fn d_train() -> usize {
    16
}
fn d_test() -> usize {
    4
}
fn d_blobs() -> usize {
    4
}
fn d_edges() -> usize {
    3
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dir: None,
            patch: d_patch(),
            train: d_train(),
            test: d_test(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            blobs: d_blobs(),
            edges: d_edges(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("dataset: patch size must be positive".into()));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config(
                "dataset: need at least one train and one test image".into(),
            ));
        }
        if let Some(dir) = &self.dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("dataset dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

/// Loads or generates `spec.train + spec.test` patches. Every image
/// contributes one patch at a seeded random offset; images are assigned to
/// the splits in sorted file-name order.
pub fn load_dataset(spec: &DatasetSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let count = spec.train + spec.test;
    let mut patches = match &spec.dir {
        None => (0..count)
            .map(|_| synthetic_image(spec.patch, &spec.synthetic, rng))
            .collect(),
        Some(dir) => {
            let files = image_files(dir)?;
            if files.len() < count {
                return Err(Error::Config(format!(
                    "dataset {} has {} images, need {count}",
                    dir.display(),
                    files.len()
                )));
            }
            files[..count]
                .iter()
                .map(|f| random_patch(&read_gray(f)?, spec.patch, rng).map_err(|e| annotate(e, f)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let test = patches.split_off(spec.train);
    Ok(Dataset { train: patches, test })
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Shape(m) => Error::Image {
            path: path.to_path_buf(),
            message: m,
        },
        other => other,
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for e in entries {
        let path = e?.path();
        let ext = path.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads an 8- or 16-bit image as luma in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
    Tensor::new(vec![h as usize, w as usize], data)
}

/// Writes `x` clamped to `[0, 1]` as an 8-bit PNG or PGM (by extension).
pub fn write_gray(path: &Path, x: &Tensor) -> Result<()> {
    let [h, w] = *x.shape() else {
        return Err(Error::shape(format!("images must be 2-D, got {:?}", x.shape())));
    };
    let bytes = x
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Square patch at a uniformly drawn offset.
pub fn random_patch(img: &Tensor, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let [h, w] = *img.shape() else {
        return Err(Error::shape("images must be 2-D"));
    };
    if size > h || size > w {
        return Err(Error::shape(format!(
            "image {h}x{w} is smaller than the {size}x{size} patch"
        )));
    }
    let i0 = rng.below(h - size + 1);
    let j0 = rng.below(w - size + 1);
    let mut p = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            p.set2(i, j, img.get2(i0 + i, j0 + j));
        }
    }
    Ok(p)
}

/// Piecewise-smooth image: a random linear ramp, Gaussian bumps and
/// constant jumps across random lines, rescaled to span `[0, 1]`.
pub fn synthetic_image(size: usize, spec: &SyntheticSpec, rng: &mut Rng) -> Tensor {
    let n = size as f64;
    let (gx, gy) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
    let blobs: Vec<[f64; 4]> = (0..spec.blobs)
        .map(|_| {
            [
                rng.uniform_range(0.0, n),
                rng.uniform_range(0.0, n),
                rng.uniform_range(0.08, 0.3) * n,
                rng.uniform_range(-1.5, 1.5),
            ]
        })
        .collect();
    let edges: Vec<[f64; 4]> = (0..spec.edges)
        .map(|_| {
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            [
                angle.cos(),
                angle.sin(),
                rng.uniform_range(0.2, 0.8) * n,
                rng.uniform_range(-1.0, 1.0),
            ]
        })
        .collect();
    let mut img = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64, j as f64);
            let mut v = 0.5 * (gx * x + gy * y) / n;
            for [cy, cx, r, a] in &blobs {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            for [c, s, off, jump] in &edges {
                // line through the patch centre shifted by off - n / 2
                if c * (x - n / 2.0) + s * (y - n / 2.0) > off - n / 2.0 {
                    v += jump;
                }
            }
            img.set2(i, j, v);
        }
    }
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Tensor::full(&[size, size], 0.5);
    }
    img.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}
