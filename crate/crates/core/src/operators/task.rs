use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::linear_op::LinearOp;
use super::tv::{tv_prox, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// One inverse problem together with the parameters that define it.
#[derive(Clone, Debug)]
pub enum TaskKind {
    /// `y = x + sigma * e`
    Denoise { sigma: f64 },
    /// `A = I`, target is the TV prox of the input.
    TvProx { strength: f64 },
    /// `y = k * x`, circular, noiseless.
    Deblur { kernel: Tensor },
    /// `y = M . x`
    Inpaint { mask: Tensor },
    /// `y = decimate(x)`
    SuperRes { factor: usize },
    /// `y = M F x`
    Mri { mask: Tensor },
}

impl TaskKind {
    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::Denoise { .. } => "T1",
            TaskKind::TvProx { .. } => "T2",
            TaskKind::Deblur { .. } => "T3",
            TaskKind::Inpaint { .. } => "T4",
            TaskKind::SuperRes { .. } => "SR",
            TaskKind::Mri { .. } => "MRI",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetTransform {
    Identity,
    TvProx,
}

/// A ground-truth / measurement pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub operator: LinearOp,
    pub noise_sigma: f64,
    pub target: TargetTransform,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Task {
    /// Noiseless task `y = A x` built from ground-truth signals.
    pub fn noiseless(name: impl Into<String>, operator: LinearOp, train: &[Tensor], test: &[Tensor]) -> Result<Self> {
        let pairs = |xs: &[Tensor]| -> Result<Vec<Sample>> {
            xs.iter()
                .map(|x| {
                    Ok(Sample {
                        x: x.clone(),
                        y: operator.apply(x)?,
                    })
                })
                .collect()
        };
        let train = pairs(train)?;
        let test = pairs(test)?;
        Ok(Self {
            name: name.into(),
            operator,
            noise_sigma: 0.0,
            target: TargetTransform::Identity,
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn image_shape(&self) -> &[usize] {
        self.operator.input_shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Builds a task from clean images, generating measurements (and targets).
pub fn make_task(kind: &TaskKind, train_images: &[Tensor], test_images: &[Tensor], rng: &mut Rng) -> Result<Task> {
    let shape = train_images
        .first()
        .or(test_images.first())
        .ok_or_else(|| Error::invalid("a task needs at least one image"))?
        .shape()
        .to_vec();
    for img in train_images.iter().chain(test_images) {
        img.ensure_shape(&shape, "task images")?;
    }
    let (operator, sigma, target) = match kind {
        TaskKind::Denoise { sigma } => {
            if !(*sigma >= 0.0) {
                return Err(Error::invalid("noise level must be >= 0"));
            }
            (LinearOp::identity(&shape), *sigma, TargetTransform::Identity)
        }
        TaskKind::TvProx { strength } => {
            if !(*strength >= 0.0) {
                return Err(Error::invalid("TV strength must be >= 0"));
            }
            (LinearOp::identity(&shape), 0.0, TargetTransform::TvProx)
        }
        TaskKind::Deblur { kernel } => (LinearOp::conv(&shape, kernel.clone())?, 0.0, TargetTransform::Identity),
        TaskKind::Inpaint { mask } => {
            mask.ensure_shape(&shape, "inpainting mask")?;
            (LinearOp::mask(mask.clone())?, 0.0, TargetTransform::Identity)
        }
        TaskKind::SuperRes { factor } => (LinearOp::decimation(&shape, *factor)?, 0.0, TargetTransform::Identity),
        TaskKind::Mri { mask } => {
            mask.ensure_shape(&shape, "frequency mask")?;
            (LinearOp::fourier_mask(mask.clone())?, 0.0, TargetTransform::Identity)
        }
    };

    let mut generate = |images: &[Tensor]| -> Result<Vec<Sample>> {
        images
            .iter()
            .map(|img| {
                let mut y = operator.apply(img)?;
                if sigma > 0.0 {
                    let noise = rng.normal_tensor(y.shape());
                    y.axpy(sigma, &noise);
                }
                let x = match (target, kind) {
                    (TargetTransform::TvProx, TaskKind::TvProx { strength }) => {
                        tv_prox(&y, *strength, DEFAULT_TOL, DEFAULT_MAX_ITER)?
                    }
                    _ => img.clone(),
                };
                Ok(Sample { x, y })
            })
            .collect()
    };
    let train = generate(train_images)?;
    let test = generate(test_images)?;
    Ok(Task {
        name: kind.label().to_string(),
        operator,
        noise_sigma: sigma,
        target,
        train,
        test,
    })
}
