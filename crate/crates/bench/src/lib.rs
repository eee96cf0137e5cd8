//! Fixtures shared by the `kernels` benchmarks: desk-scale images, operators
//! and models built from fixed seeds so timings are comparable across runs.

use metainv::bilevel::InnerConfig;
use metainv::harness::{synthetic_image, SyntheticSpec};
use metainv::models::{LinearModel, LossMode, ParamVector, PdnetParams};
use metainv::operators::{make_task, TaskKind};
use metainv::{LinearOp, Rng, Task, Tensor};

/// Side of the square test images.
pub const SIDE: usize = 32;

pub fn image(seed: u64) -> Tensor {
    synthetic_image(SIDE, &SyntheticSpec::default(), &mut Rng::new(seed, 0))
}

/// Normalized 5x5 box blur on a `SIDE x SIDE` image.
pub fn blur() -> LinearOp {
    LinearOp::conv(&[SIDE, SIDE], Tensor::full(&[5, 5], 1.0 / 25.0)).expect("kernel fits")
}

pub fn pdnet(layers: usize, channels: usize) -> PdnetParams {
    PdnetParams::init(layers, channels, 0.5, 0.5, &mut Rng::new(1, 0)).expect("valid sizes")
}

/// Inpainting task on `count` synthetic images of side `side`.
pub fn inpaint_task(side: usize, count: usize) -> Task {
    let mut rng = Rng::new(2, 0);
    let imgs: Vec<Tensor> = (0..count)
        .map(|_| synthetic_image(side, &SyntheticSpec::default(), &mut rng))
        .collect();
    let mask = Tensor::new(
        vec![side, side],
        (0..side * side).map(|_| f64::from(rng.bernoulli(0.7))).collect(),
    )
    .expect("shape");
    let (train, test) = imgs.split_at(count / 2);
    make_task(&TaskKind::Inpaint { mask }, train, test, &mut rng).expect("valid task")
}

/// Linear model and flattened dense task of dimension `n`.
pub fn linear_setup(n: usize) -> (ParamVector, Task) {
    let mut rng = Rng::new(3, 0);
    let a = rng.normal_tensor(&[n / 2, n]).to_matrix().expect("matrix");
    let xs: Vec<Tensor> = (0..40).map(|_| rng.normal_tensor(&[n])).collect();
    let task = Task::noiseless("dense", LinearOp::from_matrix(a), &xs[..20], &xs[20..]).expect("valid task");
    let theta = LinearModel::new(rng.normal_tensor(&[n, n / 2]).scale(0.1))
        .expect("matrix")
        .to_params();
    (theta, task)
}

/// One-step Adam adaptation used for PDNet meta-training.
pub fn one_step_adam() -> InnerConfig {
    InnerConfig::adam(LossMode::Sup, 1, 1e-3, 1.0)
}
