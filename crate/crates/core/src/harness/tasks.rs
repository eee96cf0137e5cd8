//! Declarative task specifications and their materialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::read_npy;
use crate::operators::{make_task, Task, TaskKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One inverse problem as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    Denoise {
        #[serde(default = "d_sigma")]
        sigma: f64,
    },
    Tv {
        #[serde(default = "d_strength")]
        strength: f64,
    },
    Deblur {
        /// NPY kernel; a motion-like line kernel is generated when absent.
        #[serde(default)]
        kernel: Option<PathBuf>,
        #[serde(default = "d_kernel_size")]
        size: usize,
        #[serde(default = "d_angle")]
        angle_deg: f64,
    },
    Inpaint {
        #[serde(default)]
        mask: Option<PathBuf>,
        /// Fraction of pixels hidden by a generated mask.
        #[serde(default = "d_drop")]
        drop: f64,
    },
    Superres {
        #[serde(default = "d_factor")]
        factor: usize,
    },
    Mri {
        #[serde(default)]
        mask: Option<PathBuf>,
        #[serde(default = "d_accel")]
        acceleration: usize,
        /// Fraction of low-frequency columns always sampled.
        #[serde(default = "d_center")]
        center_fraction: f64,
    },
}

fn d_sigma() -> f64 {
    0.1
}
fn d_strength() -> f64 {
    0.1
}
fn d_kernel_size() -> usize {
    5
}
fn d_angle() -> f64 {
    30.0
}
fn d_drop() -> f64 {
    0.3
}
fn d_factor() -> usize {
    2
}
fn d_accel() -> usize {
    4
}
fn d_center() -> f64 {
    0.08
}

/// T1 to T4 with their default parameters.
pub fn default_training_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::Denoise { sigma: d_sigma() },
        TaskSpec::Tv { strength: d_strength() },
        TaskSpec::Deblur {
            kernel: None,
            size: d_kernel_size(),
            angle_deg: d_angle(),
        },
        TaskSpec::Inpaint {
            mask: None,
            drop: d_drop(),
        },
    ]
}

impl TaskSpec {
    pub fn superres(factor: usize) -> Self {
        TaskSpec::Superres { factor }
    }

    pub fn paths(&self) -> Vec<&Path> {
        match self {
            TaskSpec::Deblur { kernel: Some(p), .. }
            | TaskSpec::Inpaint { mask: Some(p), .. }
            | TaskSpec::Mri { mask: Some(p), .. } => vec![p.as_path()],
            _ => Vec::new(),
        }
    }

    pub(crate) fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            TaskSpec::Deblur { kernel: Some(p), .. }
            | TaskSpec::Inpaint { mask: Some(p), .. }
            | TaskSpec::Mri { mask: Some(p), .. } => vec![p],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match *self {
            TaskSpec::Denoise { sigma } if !(sigma >= 0.0) => bad("denoise: sigma must be >= 0"),
            TaskSpec::Tv { strength } if !(strength >= 0.0) => bad("tv: strength must be >= 0"),
            TaskSpec::Deblur { size, .. } if size == 0 || size % 2 == 0 => bad("deblur: kernel size must be odd"),
            TaskSpec::Inpaint { drop, .. } if !(0.0..1.0).contains(&drop) => bad("inpaint: drop must be in [0, 1)"),
            TaskSpec::Superres { factor } if factor < 2 => bad("superres: factor must be >= 2"),
            TaskSpec::Mri {
                acceleration,
                center_fraction,
                ..
            } if acceleration == 0 || !(0.0..=1.0).contains(&center_fraction) => {
                bad("mri: need acceleration >= 1 and center_fraction in [0, 1]")
            }
            _ => Ok(()),
        }
    }

    /// Operator parameters for images of `shape`; random masks draw from `rng`.
    pub fn kind(&self, shape: &[usize], rng: &mut Rng) -> Result<TaskKind> {
        self.validate()?;
        Ok(match self {
            TaskSpec::Denoise { sigma } => TaskKind::Denoise { sigma: *sigma },
            TaskSpec::Tv { strength } => TaskKind::TvProx { strength: *strength },
            TaskSpec::Deblur {
                kernel,
                size,
                angle_deg,
            } => TaskKind::Deblur {
                kernel: match kernel {
                    Some(p) => read_npy(p)?,
                    None => motion_kernel(*size, *angle_deg),
                },
            },
            TaskSpec::Inpaint { mask, drop } => TaskKind::Inpaint {
                mask: match mask {
                    Some(p) => read_npy(p)?,
                    None => random_mask(shape, *drop, rng),
                },
            },
            TaskSpec::Superres { factor } => TaskKind::SuperRes { factor: *factor },
            TaskSpec::Mri {
                mask,
                acceleration,
                center_fraction,
            } => TaskKind::Mri {
                mask: match mask {
                    Some(p) => read_npy(p)?,
                    None => cartesian_mask(shape, *acceleration, *center_fraction, rng)?,
                },
            },
        })
    }

    /// Builds the task from clean images.
    pub fn build(&self, train: &[Tensor], test: &[Tensor], rng: &mut Rng) -> Result<Task> {
        let shape = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::Config("a task needs at least one image".into()))?
            .shape()
            .to_vec();
        let kind = self.kind(&shape, rng)?;
        make_task(&kind, train, test, rng)
    }
}

/// Normalized line of length `size` through the kernel centre at `angle_deg`,
/// splatted bilinearly onto a `size x size` grid.
pub fn motion_kernel(size: usize, angle_deg: f64) -> Tensor {
    let mut k = Tensor::zeros(&[size, size]);
    let c = (size / 2) as f64;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let samples = 4 * size;
    for t in 0..samples {
        let r = (t as f64 + 0.5) / samples as f64 * (size as f64 - 1.0) - c;
        let (i, j) = (c - r * s, c + r * co);
        let (i0, j0) = (i.floor(), j.floor());
        let (fi, fj) = (i - i0, j - j0);
        for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
            for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
                let (ii, jj) = (i0 + di, j0 + dj);
                if ii >= 0.0 && jj >= 0.0 && (ii as usize) < size && (jj as usize) < size {
                    let v = k.get2(ii as usize, jj as usize);
                    k.set2(ii as usize, jj as usize, v + wi * wj);
                }
            }
        }
    }
    let total = k.sum();
    k.scale(1.0 / total)
}

/// Binary mask hiding each pixel with probability `drop`.
pub fn random_mask(shape: &[usize], drop: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| f64::from(!rng.bernoulli(drop))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Column-undersampling k-space mask in unshifted DFT order: the lowest
/// frequencies (indices near 0 and near `w`) are always kept, the remaining
/// budget of `w / acceleration` columns is drawn uniformly.
pub fn cartesian_mask(shape: &[usize], acceleration: usize, center_fraction: f64, rng: &mut Rng) -> Result<Tensor> {
    let [h, w] = *shape else {
        return Err(Error::Config(format!("MRI masks need 2-D images, got {shape:?}")));
    };
    let budget = (w / acceleration).max(1);
    let center = ((w as f64 * center_fraction).round() as usize).clamp(1, budget);
    let mut keep = vec![false; w];
    // frequencies 0, 1, -1, 2, -2, ...
    for k in 0..center {
        let idx = if k % 2 == 0 { k / 2 } else { w - k.div_ceil(2) };
        keep[idx] = true;
    }
    let mut rest: Vec<usize> = (0..w).filter(|&j| !keep[j]).collect();
    rng.shuffle(&mut rest);
    for &j in rest.iter().take(budget - center) {
        keep[j] = true;
    }
    let mut m = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for (j, &k) in keep.iter().enumerate() {
            if k {
                m.set2(i, j, 1.0);
            }
        }
    }
    Ok(m)
}
